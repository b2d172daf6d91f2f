#pragma once

#include <cmath>
#include <cstdint>

namespace stochdil {

// Philox4x32-10 counter-based generator (Salmon, Moraes, Dror, Shaw, SC'11).
// A pure function of (counter, key): any draw can be regenerated from its
// coordinates, which makes noise paths replayable and trivially parallel.
struct PhiloxBlock {
  uint32_t v[4];
};

inline PhiloxBlock philox4x32(const uint32_t ctr[4], const uint32_t key[2]) {
  constexpr uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  uint32_t x0 = ctr[0], x1 = ctr[1], x2 = ctr[2], x3 = ctr[3];
  uint32_t k0 = key[0], k1 = key[1];
  for (int round = 0; round < 10; ++round) {
    const uint64_t p0 = static_cast<uint64_t>(kM0) * x0;
    const uint64_t p1 = static_cast<uint64_t>(kM1) * x2;
    const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
    const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
    x0 = hi1 ^ x1 ^ k0;
    x1 = lo1;
    x2 = hi0 ^ x3 ^ k1;
    x3 = lo0;
    k0 += kW0;
    k1 += kW1;
  }
  return PhiloxBlock{{x0, x1, x2, x3}};
}

// Deterministic scalar stream on top of philox4x32. The key is the user seed;
// the counter encodes (draw index, stream id), so independent streams (one per
// Monte Carlo sample, say) never collide and replay exactly.
class CounterRng {
 public:
  explicit CounterRng(uint64_t seed, uint64_t stream = 0)
      : key_{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)},
        stream_{static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)} {}

  uint64_t next_u64() {
    if (buf_pos_ >= 2) {
      const uint32_t ctr[4] = {static_cast<uint32_t>(index_), static_cast<uint32_t>(index_ >> 32),
                               stream_[0], stream_[1]};
      const PhiloxBlock b = philox4x32(ctr, key_);
      buf_[0] = static_cast<uint64_t>(b.v[0]) | (static_cast<uint64_t>(b.v[1]) << 32);
      buf_[1] = static_cast<uint64_t>(b.v[2]) | (static_cast<uint64_t>(b.v[3]) << 32);
      buf_pos_ = 0;
      ++index_;
    }
    return buf_[buf_pos_++];
  }

  // Uniform on the open interval (0,1): 53-bit mantissa, offset by half an ulp
  // so that 0 and 1 are unreachable (log in Box-Muller stays finite).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // Standard normal via Box-Muller on two consecutive uniforms; the second
  // member of each pair is cached and returned by the next call.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  // +-1 with equal probability.
  double rademacher() { return uniform() < 0.5 ? 1.0 : -1.0; }

  // Three-point law {0, +sqrt(3), -sqrt(3)} with probabilities {2/3, 1/6, 1/6}:
  // matches the standard normal's moments up to fourth order.
  double three_point() {
    const double u = uniform();
    if (u < 2.0 / 3.0) return 0.0;
    return u < 5.0 / 6.0 ? std::sqrt(3.0) : -std::sqrt(3.0);
  }

 private:
  uint32_t key_[2];
  uint32_t stream_[2];
  uint64_t index_ = 0;
  uint64_t buf_[2] = {0, 0};
  int buf_pos_ = 2;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stochdil
