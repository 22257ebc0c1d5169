#include "snic/entropy_coder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "snic/hash.hpp"
#include "snic/serialize.hpp"

namespace snic {

namespace {

constexpr uint32_t kTopValue = 1u << 24;

// Tail quantile of the logistic at probability 2^-16.
const double kTailQuantile = std::log(65536.0 - 1.0);

double logistic_mass(double v_plus_half, double mu, double s) {
  return detail::stable_sigmoid((v_plus_half - mu) / s);
}

double symbol_prob(int32_t v, double mu, double s) {
  double p = logistic_mass(v + 0.5, mu, s) - logistic_mass(v - 0.5, mu, s);
  return std::max(p, kLikelihoodFloor);
}

}  // namespace

ChannelCdf build_channel_cdf(double mu, double scale) {
  check(std::isfinite(mu) && std::isfinite(scale) && scale > 0.0,
        "build_cdf: entropy parameters must be finite with positive scale");
  check(scale <= 2048.0, "build_cdf: degenerate scale " + std::to_string(scale) +
                             " (too wide to tabulate at 16-bit precision)");

  // Quantile-based support: at most 2^-16 of the mass sits beyond each end.
  int64_t lo = static_cast<int64_t>(std::floor(mu - scale * kTailQuantile + 0.5));
  int64_t hi = static_cast<int64_t>(std::ceil(mu + scale * kTailQuantile - 0.5));
  int64_t center = static_cast<int64_t>(std::llround(mu));
  lo = std::min(lo, center);
  hi = std::max(hi, center);
  lo = std::max<int64_t>(lo, -32768);
  hi = std::min<int64_t>(hi, 32767);

  ChannelCdf cdf;
  cdf.v_min = static_cast<int32_t>(lo);
  cdf.v_max = static_cast<int32_t>(hi);
  const int n_values = static_cast<int>(hi - lo + 1);
  const int n_symbols = n_values + 1;  // + escape
  check(n_symbols + 1 < static_cast<int>(kCoderTotal),
        "build_cdf: support too wide for 16-bit counts");

  std::vector<double> raw(static_cast<size_t>(n_values));
  std::vector<uint32_t> counts(static_cast<size_t>(n_symbols), 1);
  uint64_t total = n_symbols;  // every symbol starts at the minimum count of 1
  int max_idx = 0;
  for (int i = 0; i < n_values; ++i) {
    raw[i] = symbol_prob(cdf.v_min + i, mu, scale) * kCoderTotal;
    uint32_t c = static_cast<uint32_t>(raw[i]);
    if (c > 1) {
      counts[i] = c;
      total += c - 1;
    }
    if (counts[i] > counts[max_idx]) max_idx = i;
  }

  if (total > kCoderTotal) {
    // Rounding pushed us over; shave the excess off the largest counts.
    uint64_t excess = total - kCoderTotal;
    while (excess > 0) {
      int idx = 0;
      for (int i = 1; i < n_values; ++i)
        if (counts[i] > counts[idx]) idx = i;
      uint32_t take = static_cast<uint32_t>(std::min<uint64_t>(excess, counts[idx] - 1));
      check(take > 0, "build_cdf: cannot normalize counts");
      counts[idx] -= take;
      excess -= take;
    }
  } else if (total < kCoderTotal) {
    counts[max_idx] += static_cast<uint32_t>(kCoderTotal - total);
  }

  cdf.cum.resize(static_cast<size_t>(n_symbols) + 1);
  cdf.cum[0] = 0;
  for (int i = 0; i < n_symbols; ++i) cdf.cum[i + 1] = cdf.cum[i] + counts[i];
  check(cdf.cum.back() == kCoderTotal, "build_cdf: counts do not sum to the coder total");
  return cdf;
}

CdfTable build_cdf(const CodecModel<float>& model) {
  CdfTable table;
  table.model_fingerprint = model_fingerprint(model);
  const int n_c = model.config.latent_channels;
  table.channels.reserve(static_cast<size_t>(n_c));
  for (int c = 0; c < n_c; ++c)
    table.channels.push_back(build_channel_cdf(model.entropy_mu(c), model.entropy_scale(c)));
  return table;
}

// ---------------------------------------------------------------------------
// Range coder
// ---------------------------------------------------------------------------

void RangeEncoder::shift_low() {
  if (static_cast<uint32_t>(low_ >> 32) != 0 || static_cast<uint32_t>(low_) < 0xFF000000u) {
    const uint8_t carry = static_cast<uint8_t>(low_ >> 32);
    if (first_byte_) {
      // The first byte carries no information (low + range <= 2^32 until the
      // first renormalization), so it is never emitted.
      first_byte_ = false;
    } else {
      out_.push_back(static_cast<uint8_t>(cache_ + carry));
    }
    for (; pending_ > 0; --pending_) out_.push_back(static_cast<uint8_t>(0xFF + carry));
    cache_ = static_cast<uint8_t>(low_ >> 24);
  } else {
    ++pending_;
  }
  low_ = (low_ << 8) & 0xFFFFFFFFull;
}

void RangeEncoder::encode(uint32_t cum, uint32_t freq) {
  check(!finished_, "range encoder already finished");
  check(freq > 0 && cum + freq <= kCoderTotal, "range encoder: invalid frequency interval");
  const uint32_t r = range_ >> 16;
  low_ += static_cast<uint64_t>(cum) * r;
  range_ = freq * r;
  while (range_ < kTopValue) {
    shift_low();
    range_ <<= 8;
  }
}

void RangeEncoder::encode_raw_bits(uint32_t value, int bits) {
  for (int b = bits - 1; b >= 0; --b) {
    const uint32_t bit = (value >> b) & 1u;
    encode(bit ? kCoderTotal / 2 : 0, kCoderTotal / 2);
  }
}

std::vector<uint8_t> RangeEncoder::finish() {
  check(!finished_, "range encoder already finished");
  finished_ = true;
  // Pick the value in [low, low + range) with the most trailing zero bytes;
  // the decoder zero-fills past the end of the stream, so those bytes need
  // not be written.
  const uint64_t mask = kTopValue - 1;
  uint64_t rounded = (low_ + mask) & ~mask;  // range_ >= kTopValue, so it fits
  low_ = rounded;
  shift_low();
  shift_low();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(const uint8_t* data, size_t len) : p_(data), end_(data + len) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

uint8_t RangeDecoder::next_byte() {
  if (p_ < end_) return *p_++;
  ++zero_fill_;
  return 0;
}

uint32_t RangeDecoder::decode_freq() {
  last_div_ = range_ >> 16;
  uint32_t f = code_ / last_div_;
  return f < kCoderTotal ? f : kCoderTotal - 1;
}

void RangeDecoder::decode_update(uint32_t cum, uint32_t freq) {
  code_ -= cum * last_div_;
  range_ = freq * last_div_;
  while (range_ < kTopValue) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

uint32_t RangeDecoder::decode_raw_bits(int bits) {
  uint32_t v = 0;
  for (int b = 0; b < bits; ++b) {
    const uint32_t f = decode_freq();
    const uint32_t bit = f >= kCoderTotal / 2 ? 1u : 0u;
    decode_update(bit ? kCoderTotal / 2 : 0, kCoderTotal / 2);
    v = (v << 1) | bit;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

std::vector<uint8_t> encode_symbols(const std::vector<int32_t>& symbols,
                                    const std::vector<int32_t>& channel_ids,
                                    const CdfTable& table) {
  check(symbols.size() == channel_ids.size(), "encode_symbols: one channel id per symbol required");
  RangeEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i) {
    const int32_t ch = channel_ids[i];
    check(ch >= 0 && ch < static_cast<int32_t>(table.channels.size()),
          "encode_symbols: channel id out of range");
    const ChannelCdf& cdf = table.channels[static_cast<size_t>(ch)];
    const int32_t v = symbols[i];
    if (cdf.contains(v)) {
      const int idx = v - cdf.v_min;
      enc.encode(cdf.cum[idx], cdf.count(idx));
    } else {
      check(v >= -32768 && v <= 32767, "encode_symbols: symbol outside the raw 16-bit range");
      const int esc = cdf.escape_index();
      enc.encode(cdf.cum[esc], cdf.count(esc));
      enc.encode_raw_bits(static_cast<uint32_t>(v + 32768), 16);
    }
  }
  return enc.finish();
}

std::vector<int32_t> decode_symbols(const uint8_t* data, size_t len, size_t count,
                                    const std::vector<int32_t>& channel_ids,
                                    const CdfTable& table) {
  check(channel_ids.size() == count, "decode_symbols: one channel id per symbol required");
  RangeDecoder dec(data, len);
  std::vector<int32_t> out(count);
  for (size_t i = 0; i < count; ++i) {
    const int32_t ch = channel_ids[i];
    check(ch >= 0 && ch < static_cast<int32_t>(table.channels.size()),
          "decode_symbols: channel id out of range");
    const ChannelCdf& cdf = table.channels[static_cast<size_t>(ch)];
    const uint32_t f = dec.decode_freq();
    const auto it = std::upper_bound(cdf.cum.begin(), cdf.cum.end(), f);
    const int idx = static_cast<int>(it - cdf.cum.begin()) - 1;
    dec.decode_update(cdf.cum[idx], cdf.count(idx));
    if (idx == cdf.escape_index()) {
      out[i] = static_cast<int32_t>(dec.decode_raw_bits(16)) - 32768;
    } else {
      out[i] = cdf.v_min + idx;
    }
    // The flush writes at most two bytes short of the final code window, so a
    // healthy stream never zero-fills more than the window itself.
    check(dec.zero_fill() <= 8, "decode_symbols: coded stream is truncated");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

namespace {

constexpr char kBitstreamMagic[8] = {'S', 'N', 'I', 'C', 'B', 'I', 'T', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

std::vector<uint8_t> pack_bitstream(const BitstreamHeader& h, const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> out;
  out.reserve(kBitstreamHeaderBytes + payload.size());
  out.insert(out.end(), kBitstreamMagic, kBitstreamMagic + 8);
  put_u32(out, h.version);
  put_u64(out, h.model_fingerprint);
  put_u32(out, h.true_h);
  put_u32(out, h.true_w);
  put_u32(out, h.true_c);
  put_u32(out, h.padded_h);
  put_u32(out, h.padded_w);
  put_u32(out, h.latent_c);
  put_u32(out, h.latent_h);
  put_u32(out, h.latent_w);
  put_u64(out, payload.size());
  put_u32(out, fnv1a32(payload.data(), payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  check(out.size() == kBitstreamHeaderBytes + payload.size(), "pack_bitstream: header layout drifted");
  return out;
}

void unpack_bitstream(const std::vector<uint8_t>& bytes, BitstreamHeader* header,
                      std::vector<uint8_t>* payload) {
  check(bytes.size() >= kBitstreamHeaderBytes, "unpack: stream shorter than the header");
  check(std::memcmp(bytes.data(), kBitstreamMagic, 8) == 0, "unpack: bad magic, not a coded stream");
  const uint8_t* p = bytes.data() + 8;
  BitstreamHeader h;
  h.version = get_u32(p); p += 4;
  check(h.version == 1, "unpack: unsupported stream version " + std::to_string(h.version));
  h.model_fingerprint = get_u64(p); p += 8;
  h.true_h = get_u32(p); p += 4;
  h.true_w = get_u32(p); p += 4;
  h.true_c = get_u32(p); p += 4;
  h.padded_h = get_u32(p); p += 4;
  h.padded_w = get_u32(p); p += 4;
  h.latent_c = get_u32(p); p += 4;
  h.latent_h = get_u32(p); p += 4;
  h.latent_w = get_u32(p); p += 4;
  const uint64_t payload_len = get_u64(p); p += 8;
  const uint32_t checksum = get_u32(p); p += 4;
  check(bytes.size() == kBitstreamHeaderBytes + payload_len,
        "unpack: payload length field does not match the stream size");
  std::vector<uint8_t> pl(bytes.begin() + static_cast<long>(kBitstreamHeaderBytes), bytes.end());
  check(fnv1a32(pl.data(), pl.size()) == checksum, "unpack: payload checksum mismatch (truncated or corrupted stream)");
  if (header) *header = h;
  if (payload) *payload = std::move(pl);
}

}  // namespace snic
