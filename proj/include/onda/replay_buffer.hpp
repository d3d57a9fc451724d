#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "onda/storm_bench.hpp"

namespace onda {

/// Fixed labeled subset of the source set. Contents never change after build.
class ReplayBuffer {
 public:
  ReplayBuffer() = default;

  /// Uniform sample without replacement; ids index into `source`.
  static ReplayBuffer build(std::span<const SceneSample> source, Index capacity, std::uint64_t seed);

  Index capacity() const { return static_cast<Index>(samples_.size()); }
  bool empty() const { return samples_.empty(); }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Index>& ids() const { return ids_; }
  const SceneSample& sample(Index i) const { return samples_.at(static_cast<std::size_t>(i)); }

  /// Buffer positions served at `step`. Item i of step s is position
  /// p = s*k + i of an endless sequence of epochs, each a fresh permutation
  /// seeded by (seed, epoch).
  std::vector<Index> batch_indices(Index k, long step) const;
  LabeledBatch sample_batch(Index k, long step) const;

  /// Permutation of [0, capacity) used for one epoch.
  std::vector<Index> epoch_permutation(long epoch) const;

  /// {"seed": s, "capacity": n, "ids": [...]}
  std::string manifest_json() const;

 private:
  std::vector<SceneSample> samples_;
  std::vector<Index> ids_;
  std::uint64_t seed_ = 0;
};

}  // namespace onda
