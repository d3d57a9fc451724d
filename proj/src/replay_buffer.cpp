#include "onda/replay_buffer.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <json.hpp>

#include "onda/error.hpp"

namespace onda {

ReplayBuffer ReplayBuffer::build(std::span<const SceneSample> source, Index capacity, std::uint64_t seed) {
  if (capacity < 0 || capacity > static_cast<Index>(source.size())) {
    throw ConfigError("replay capacity " + std::to_string(capacity) + " outside [0, " + std::to_string(source.size()) +
                      "]");
  }
  std::vector<Index> all(source.size());
  std::iota(all.begin(), all.end(), Index{0});
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates
  for (Index i = 0; i < capacity; ++i) {
    std::uniform_int_distribution<Index> pick(i, static_cast<Index>(all.size()) - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  ReplayBuffer rb;
  rb.seed_ = seed;
  rb.ids_.assign(all.begin(), all.begin() + capacity);
  std::sort(rb.ids_.begin(), rb.ids_.end());
  for (Index id : rb.ids_) rb.samples_.push_back(source[static_cast<std::size_t>(id)]);
  return rb;
}

std::vector<Index> ReplayBuffer::epoch_permutation(long epoch) const {
  std::vector<Index> perm(samples_.size());
  std::iota(perm.begin(), perm.end(), Index{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(static_cast<std::uint64_t>(epoch) >> 32)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

std::vector<Index> ReplayBuffer::batch_indices(Index k, long step) const {
  if (empty()) throw ConfigError("sample_batch: empty replay buffer");
  if (k <= 0 || k > capacity()) throw ConfigError("sample_batch: k must lie in [1, capacity]");
  if (step < 0) throw ConfigError("sample_batch: negative step");
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(k));
  long cached_epoch = -1;
  std::vector<Index> perm;
  for (Index i = 0; i < k; ++i) {
    const long p = step * k + i;
    const long epoch = p / capacity();
    if (epoch != cached_epoch) {
      perm = epoch_permutation(epoch);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(p % capacity())]);
  }
  return out;
}

LabeledBatch ReplayBuffer::sample_batch(Index k, long step) const {
  std::vector<const SceneSample*> picked;
  for (Index i : batch_indices(k, step)) picked.push_back(&samples_[static_cast<std::size_t>(i)]);
  return stack(picked);
}

std::string ReplayBuffer::manifest_json() const {
  nlohmann::json j;
  j["seed"] = seed_;
  j["capacity"] = capacity();
  j["ids"] = ids_;
  return j.dump();
}

}  // namespace onda
