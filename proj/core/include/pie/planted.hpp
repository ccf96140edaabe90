#pragma once

#include <cstdint>
#include <vector>

#include "pie/model.hpp"
#include "pie/tasks.hpp"

namespace pie {

// Hand-built models with fully worked-out restoration economies. Every weight
// is explicit, so expected scores, synergies, and circuit compositions are
// closed-form and frozen in the tests.

// AND-gate fixture: three strong features each feed one of three second-layer
// gates, and one weak "key" feature feeds all three; a gate fires only when
// its strong feature AND the key are on their clean values together. The key's
// first-order score loses to three additive rival features, but its pairwise
// synergy with the strong features is large, so synergy reranking (lambda >=
// 1, boundary percent >= 25) rescues it into the budget-8 circuit while the
// lambda = 0 ranking excludes it.
struct PlantedSynergyFixture {
  ReplacementModel model;
  TaskDataset dataset;
  int budget = 8;
  FeatureOccurrence weak_partner;            // the key feature occurrence
  std::vector<FeatureOccurrence> strong;     // the three strong features
  std::vector<FeatureOccurrence> gates;      // the three AND gates
  std::vector<FeatureOccurrence> rivals;     // additive decoys outranking the key
};
PlantedSynergyFixture make_planted_synergy_fixture(int n_prompts = 32,
                                                   std::uint64_t seed = 17);

// Redundant-suppressor fixture: two first-layer features both disable the same
// second-layer inhibitor, so restoring them jointly recovers less than the sum
// of their solo restorations (negative pairwise synergy). With the positive
// clamp, reranking at any lambda leaves the budget-2 circuit unchanged.
struct NegativeSynergyFixture {
  ReplacementModel model;
  PromptPair pair;
  int budget = 2;
  FeatureOccurrence dup_a;       // weaker suppressor
  FeatureOccurrence dup_b;       // stronger suppressor (core at K=2, bp=50)
  FeatureOccurrence inhibitor;   // the shared downstream inhibitor
};
NegativeSynergyFixture make_negative_synergy_fixture();

// Two disjoint linear chains through separate channels; identity activation
// makes each chain affine, so every cross-chain pairwise synergy is exactly 0.
struct DisjointFixture {
  ReplacementModel model;
  PromptPair pair;
  std::vector<FeatureOccurrence> path_a;  // first chain, upstream then downstream
  std::vector<FeatureOccurrence> path_b;  // second chain
};
DisjointFixture make_disjoint_fixture();

// All features write positive multiples of one logit channel under identity
// activation: the restricted distribution moves along a one-parameter
// exponential-family ray toward the clean distribution, so enlarging a circuit
// can never raise the KL (exact superset dominance on this fixture).
struct ParallelWriteFixture {
  ReplacementModel model;
  PromptPair pair;
  std::vector<FeatureOccurrence> features;
};
ParallelWriteFixture make_parallel_write_fixture();

}  // namespace pie
