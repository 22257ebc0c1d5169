#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snic/codec.hpp"

namespace snic {

// Total frequency of every coding table; 16-bit probability resolution.
constexpr uint32_t kCoderTotal = 1u << 16;

// Integer support plus cumulative counts for one latent channel. The last
// symbol is an escape; values outside [v_min, v_max] are coded as the escape
// followed by a raw 16-bit signed value.
struct ChannelCdf {
  int32_t v_min = 0;
  int32_t v_max = -1;
  std::vector<uint32_t> cum;  // size = symbol count + 1; cum.front()=0, cum.back()=kCoderTotal

  int num_symbols() const { return static_cast<int>(cum.size()) - 1; }
  int escape_index() const { return num_symbols() - 1; }
  bool contains(int32_t v) const { return v >= v_min && v <= v_max; }
  uint32_t count(int idx) const { return cum[idx + 1] - cum[idx]; }
};

struct CdfTable {
  std::vector<ChannelCdf> channels;
  uint64_t model_fingerprint = 0;
};

// Tabulates the discretized logistic of every channel at 16-bit precision.
// The support covers all but <= 2^-15 of the channel mass; every symbol,
// escape included, keeps a count of at least 1.
CdfTable build_cdf(const CodecModel<float>& model);

// Same tabulation from raw per-channel parameters (used by tests with
// synthetic tables).
ChannelCdf build_channel_cdf(double mu, double scale);

// Byte-oriented range coder, 32-bit state, carry handling via a 64-bit low
// register. Integer arithmetic only.
class RangeEncoder {
 public:
  // cum/freq are cumulative and symbol counts under kCoderTotal.
  void encode(uint32_t cum, uint32_t freq);
  void encode_raw_bits(uint32_t value, int bits);
  std::vector<uint8_t> finish();

 private:
  void shift_low();
  std::vector<uint8_t> out_;
  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  int64_t pending_ = 0;
  bool first_byte_ = true;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t len);

  // Returns a frequency position in [0, kCoderTotal); the caller locates the
  // symbol and confirms with decode_update.
  uint32_t decode_freq();
  void decode_update(uint32_t cum, uint32_t freq);
  uint32_t decode_raw_bits(int bits);

  size_t zero_fill() const { return zero_fill_; }

 private:
  uint8_t next_byte();
  const uint8_t* p_;
  const uint8_t* end_;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
  uint32_t last_div_ = 0;
  size_t zero_fill_ = 0;
};

// Symbol-sequence entry points. channel_ids[i] selects the table row for
// symbols[i]; decode reproduces the sequence exactly or throws.
std::vector<uint8_t> encode_symbols(const std::vector<int32_t>& symbols,
                                    const std::vector<int32_t>& channel_ids,
                                    const CdfTable& table);
std::vector<int32_t> decode_symbols(const uint8_t* data, size_t len, size_t count,
                                    const std::vector<int32_t>& channel_ids,
                                    const CdfTable& table);

// ---------------------------------------------------------------------------
// Bitstream container
// ---------------------------------------------------------------------------

struct BitstreamHeader {
  uint32_t version = 1;
  uint64_t model_fingerprint = 0;
  uint32_t true_h = 0, true_w = 0, true_c = 3;
  uint32_t padded_h = 0, padded_w = 0;
  uint32_t latent_c = 0, latent_h = 0, latent_w = 0;
};

// magic + version + fingerprint + 9 dim fields + payload length + checksum
constexpr size_t kBitstreamHeaderBytes = 8 + 4 + 8 + 9 * 4 + 8 + 4;

std::vector<uint8_t> pack_bitstream(const BitstreamHeader& header,
                                    const std::vector<uint8_t>& payload);
// Validates magic, version, length and payload checksum.
void unpack_bitstream(const std::vector<uint8_t>& bytes, BitstreamHeader* header,
                      std::vector<uint8_t>* payload);

}  // namespace snic
