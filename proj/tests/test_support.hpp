#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

namespace xcot::testing {

/// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("xcot_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace xcot::testing

#include <algorithm>
#include <cmath>
#include <vector>

#include "xcot/policy.hpp"
#include "xcot/util.hpp"

namespace xcot::testing {

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences of `loss(params)` against `grad` on `coords`
/// randomly chosen coordinates. Step 1e-3, double precision throughout.
template <typename LossFn>
FdReport finite_difference_check(policy::Params<double> params, std::span<const double> grad,
                                 LossFn&& loss, std::size_t coords, std::uint64_t seed,
                                 double step = 1e-3) {
  Rng rng(seed);
  FdReport r;
  for (std::size_t k = 0; k < coords; ++k) {
    const auto i = rng.below(static_cast<std::uint32_t>(params.size()));
    const double saved = params.values()[i];
    params.values()[i] = saved + step;
    const double up = loss(params);
    params.values()[i] = saved - step;
    const double down = loss(params);
    params.values()[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = grad[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > r.max_rel_error) r = {rel, i, a, numeric};
  }
  return r;
}

/// Random token stream over the whole vocabulary.
inline TokenSeq random_tokens(Rng& rng, std::size_t n) {
  TokenSeq out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(rng.below(vocab().size()));
  return out;
}

}  // namespace xcot::testing
