#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <random>

namespace bedkit {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
///
/// A stream is identified by a 64-bit key and the upper 64 bits of the
/// 128-bit counter; the lower 64 bits advance with every block. Distinct
/// (key, stream) pairs give statistically independent sequences, which is
/// what lets every (replicate, design, outer index) own its own stream.
class Philox {
 public:
  using result_type = std::uint64_t;

  Philox(std::uint64_t key, std::uint64_t stream) noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept;

 private:
  void refill() noexcept;

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> out_{};
  int used_ = 4;  // 32-bit words consumed from out_
};

/// Uniform/normal/chi-square draws on top of a Philox stream.
class Rng {
 public:
  Rng(std::uint64_t key, std::uint64_t stream) noexcept : engine_(key, stream) {}

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept;
  double normal() noexcept;
  double chi_square(double dof);

  Philox& engine() noexcept { return engine_; }

 private:
  Philox engine_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// What a derived stream is used for inside one outer iteration.
enum class StreamPurpose : std::uint64_t {
  kOuter = 0,
  kMarginal = 1,
  kConditional = 2,
  kFallback = 3,
  kAux = 4,
};

/// Derives independent streams from a root seed. The key mixes
/// (root seed, replicate, design index); the stream word mixes the outer
/// index and the purpose, so adding replicates or designs never perturbs
/// existing ones.
class StreamFactory {
 public:
  StreamFactory(std::uint64_t root_seed, std::uint64_t replicate, std::uint64_t design_index) noexcept;

  [[nodiscard]] Rng stream(std::uint64_t outer_index, StreamPurpose purpose) const noexcept;
  [[nodiscard]] std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
};

}  // namespace bedkit
