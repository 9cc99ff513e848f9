#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mvfbm {

// Philox4x64-10 (Salmon et al., SC'11).  Pure function of (counter, key).
class Philox4x64 {
 public:
  using Block = std::array<std::uint64_t, 4>;
  using Key = std::array<std::uint64_t, 2>;

  static Block generate(Block ctr, Key key) {
    for (int r = 0; r < 10; ++r) {
      if (r > 0) {
        key[0] += 0x9E3779B97F4A7C15ULL;
        key[1] += 0xBB67AE8584CAA73BULL;
      }
      const unsigned __int128 p0 = static_cast<unsigned __int128>(0xD2E7470EE14C6C93ULL) * ctr[0];
      const unsigned __int128 p1 = static_cast<unsigned __int128>(0xCA5A826395121157ULL) * ctr[2];
      const auto hi0 = static_cast<std::uint64_t>(p0 >> 64), lo0 = static_cast<std::uint64_t>(p0);
      const auto hi1 = static_cast<std::uint64_t>(p1 >> 64), lo1 = static_cast<std::uint64_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }
};

// Stream purposes, kept apart in the third counter word.
enum class StreamTag : std::uint64_t { kNoise = 0, kInit = 1, kFamily = 2, kCholesky = 3 };

// Addressable normal variates keyed by (seed, index, component, tag).
// Block j yields four normals through two Box-Muller pairs.
class NormalStream {
 public:
  NormalStream(std::uint64_t seed, std::uint64_t index, std::uint64_t component, StreamTag tag = StreamTag::kNoise)
      : key_{seed, index}, comp_(component), tag_(static_cast<std::uint64_t>(tag)) {}

  std::array<double, 4> block(std::uint64_t j) const {
    const auto r = Philox4x64::generate({j, comp_, tag_, 0}, key_);
    std::array<double, 4> out{};
    for (int p = 0; p < 2; ++p) {
      const double u1 = to_unit(r[2 * p]), u2 = to_unit(r[2 * p + 1]);
      const double rad = std::sqrt(-2.0 * std::log(u1));
      out[2 * p] = rad * std::cos(6.283185307179586 * u2);
      out[2 * p + 1] = rad * std::sin(6.283185307179586 * u2);
    }
    return out;
  }

  std::array<double, 4> uniforms(std::uint64_t j) const {
    const auto r = Philox4x64::generate({j, comp_, tag_, 0}, key_);
    return {to_unit(r[0]), to_unit(r[1]), to_unit(r[2]), to_unit(r[3])};
  }

  double normal(std::uint64_t i) const { return block(i / 4)[i % 4]; }

  // Open interval (0,1).
  static double to_unit(std::uint64_t x) { return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53; }

 private:
  Philox4x64::Key key_;
  std::uint64_t comp_, tag_;
};

}  // namespace mvfbm
