#include "pie/planted.hpp"

#include <string>

#include "pie/errors.hpp"
#include "pie/rng.hpp"

namespace pie {

namespace {

// Explicit-weight skeleton: zero embeddings/unembedding/encoders/decoders of
// the right shapes, no attention, no frozen error.
ReplacementModel blank_model(ModelConfig config) {
  config.attention = AttentionKind::none;
  config.error_mode = ErrorMode::synthetic_exact;
  ReplacementModel m;
  m.config = config;
  m.explicit_weights = true;
  const int L = config.num_layers;
  const int d = config.d_model;
  const int F = config.features_per_layer;
  m.tok_embed = Mat(config.vocab_size, d);
  m.pos_embed = Mat(config.max_positions, d);
  m.unembed = Mat(d, config.vocab_size);
  for (int l = 0; l < L; ++l) {
    m.encoder.push_back(Mat(F, d));
    m.encoder_bias.push_back(Vec(F, 0.0));
    std::vector<Mat> row;
    for (int s = l; s < L; ++s) row.push_back(Mat(F, d));
    m.decoders.push_back(std::move(row));
  }
  return m;
}

}  // namespace

PlantedSynergyFixture make_planted_synergy_fixture(int n_prompts, std::uint64_t seed) {
  if (n_prompts < 1)
    throw ArgumentError("make_planted_synergy_fixture: n_prompts must be >= 1");
  // Tokens: [0, n) one clean token per prompt, n = corrupted (all-zero
  // embedding), n+1 = answer A, n+2 = answer B.
  const int V = n_prompts + 3;
  const Token corrupted_tok = n_prompts;
  const Token tok_a = n_prompts + 1;
  const Token tok_b = n_prompts + 2;

  ModelConfig config;
  config.num_layers = 2;
  config.d_model = 12;
  config.vocab_size = V;
  config.features_per_layer = 12;
  config.activation = Activation::jumprelu;
  config.jumprelu_threshold = 1.0;
  config.max_positions = 1;
  config.seed = seed;

  PlantedSynergyFixture fx;
  fx.model = blank_model(config);
  ReplacementModel& m = fx.model;

  // Clean embeddings: channels 0..3 drive the key and the strong features;
  // channels 8..10 drive the rivals with a small per-prompt wobble so
  // cross-prompt statistics are non-degenerate. Channel 7 is the logit
  // channel; channels 4..6 are the gate inputs (written, never embedded).
  Rng rng(mix_seed(seed, 301));
  for (int i = 0; i < n_prompts; ++i) {
    for (int ch = 0; ch <= 3; ++ch) m.tok_embed.at(i, ch) = 1.5;
    for (int ch = 8; ch <= 10; ++ch)
      m.tok_embed.at(i, ch) = 1.5 * (1.0 + 0.02 * (2.0 * rng.uniform() - 1.0));
  }

  // Layer 0: feature 0 = key (reads ch0); features 1..3 = strong (ch1..ch3);
  // features 4..6 = rivals (ch8..ch10).
  m.encoder[0].at(0, 0) = 1.0;
  for (int j = 0; j < 3; ++j) m.encoder[0].at(1 + j, 1 + j) = 1.0;
  for (int j = 0; j < 3; ++j) m.encoder[0].at(4 + j, 8 + j) = 1.0;

  // Key: small direct logit write, feeds all three gate inputs.
  m.dec(0, 0).at(0, 7) = 0.05;
  for (int j = 0; j < 3; ++j) m.dec(0, 0).at(0, 4 + j) = 0.05;
  // Strong features: large direct logit write, each feeds one gate input.
  for (int j = 0; j < 3; ++j) {
    m.dec(0, 0).at(1 + j, 7) = 1.5;
    m.dec(0, 0).at(1 + j, 4 + j) = 0.05;
  }
  // Rivals: purely additive logit writes sized between the key and the gates.
  const double rho[3] = {0.45, 0.47, 0.49};
  for (int j = 0; j < 3; ++j) m.dec(0, 0).at(4 + j, 7) = rho[j];

  // Layer 1: three AND gates. Gate input is 0.15 when the key and the gate's
  // strong feature both write (0.05 + 0.05 activations of 1.5 each), 0.075
  // when only one does; bias 0.91 puts the jump threshold 1.0 between the two.
  for (int j = 0; j < 3; ++j) {
    m.encoder[1].at(j, 4 + j) = 1.0;
    m.encoder_bias[1][j] = 0.91;
    m.dec(1, 1).at(j, 7) = 2.0;
  }

  m.unembed.at(7, tok_a) = 1.0;
  m.unembed.at(7, tok_b) = -1.0;

  fx.dataset.vocab.vocab_size = V;
  fx.dataset.vocab.template_tokens = 0;
  fx.dataset.provenance = "planted-synergy seed=" + std::to_string(seed) +
                          " n=" + std::to_string(n_prompts);
  for (int i = 0; i < n_prompts; ++i) {
    PromptPair pair;
    pair.id = "planted-" + std::to_string(i);
    pair.clean = {static_cast<Token>(i)};
    pair.corrupted = {corrupted_tok};
    pair.target = tok_a;
    pair.distractor = tok_b;
    pair.task = "custom";
    fx.dataset.pairs.push_back(std::move(pair));
  }

  fx.budget = 8;
  fx.weak_partner = FeatureOccurrence{0, 0, 0};
  for (int j = 0; j < 3; ++j) fx.strong.push_back(FeatureOccurrence{0, 1 + j, 0});
  for (int j = 0; j < 3; ++j) fx.gates.push_back(FeatureOccurrence{1, j, 0});
  for (int j = 0; j < 3; ++j) fx.rivals.push_back(FeatureOccurrence{0, 4 + j, 0});
  return fx;
}

NegativeSynergyFixture make_negative_synergy_fixture() {
  ModelConfig config;
  config.num_layers = 2;
  config.d_model = 8;
  config.vocab_size = 4;
  config.features_per_layer = 4;
  config.activation = Activation::relu;
  config.max_positions = 1;

  NegativeSynergyFixture fx;
  fx.model = blank_model(config);
  ReplacementModel& m = fx.model;

  // Token 0 = clean (ch0..ch3 = 1), token 1 = corrupted (ch3 = 1 only),
  // tokens 2/3 = answers A/B. Channel 7 is the logit channel; channel 3 is
  // the inhibitor's input.
  for (int ch = 0; ch <= 3; ++ch) m.tok_embed.at(0, ch) = 1.0;
  m.tok_embed.at(1, 3) = 1.0;

  // Layer 0: two suppressors write the logit channel and drain channel 3;
  // feature 2 is a small additive rival.
  m.encoder[0].at(0, 0) = 1.0;
  m.encoder[0].at(1, 1) = 1.0;
  m.encoder[0].at(2, 2) = 1.0;
  m.dec(0, 0).at(0, 7) = 0.5;
  m.dec(0, 0).at(0, 3) = -0.6;
  m.dec(0, 0).at(1, 7) = 3.0;
  m.dec(0, 0).at(1, 3) = -0.6;
  m.dec(0, 0).at(2, 7) = 0.2;

  // Layer 1: inhibitor reads channel 3 through ReLU and writes the logit
  // channel negatively. Both suppressors push its input below zero; either
  // alone only halves it.
  m.encoder[1].at(0, 3) = 1.0;
  m.dec(1, 1).at(0, 7) = -1.0;

  m.unembed.at(7, 2) = 1.0;
  m.unembed.at(7, 3) = -1.0;

  fx.pair.id = "negative-synergy-0";
  fx.pair.clean = {0};
  fx.pair.corrupted = {1};
  fx.pair.target = 2;
  fx.pair.distractor = 3;
  fx.pair.task = "custom";

  fx.budget = 2;
  fx.dup_a = FeatureOccurrence{0, 0, 0};
  fx.dup_b = FeatureOccurrence{0, 1, 0};
  fx.inhibitor = FeatureOccurrence{1, 0, 0};
  return fx;
}

DisjointFixture make_disjoint_fixture() {
  ModelConfig config;
  config.num_layers = 2;
  config.d_model = 8;
  config.vocab_size = 4;
  config.features_per_layer = 4;
  config.activation = Activation::identity;
  config.max_positions = 1;

  DisjointFixture fx;
  fx.model = blank_model(config);
  ReplacementModel& m = fx.model;

  // Chain A: ch0 -> layer-0 feature 0 -> ch2 -> layer-1 feature 0 -> ch6.
  // Chain B: ch1 -> layer-0 feature 1 -> ch3 -> layer-1 feature 1 -> ch7.
  m.tok_embed.at(0, 0) = 1.0;
  m.tok_embed.at(0, 1) = 1.0;

  m.encoder[0].at(0, 0) = 1.0;
  m.encoder[0].at(1, 1) = 1.0;
  m.dec(0, 0).at(0, 2) = 1.0;
  m.dec(0, 0).at(1, 3) = 1.0;

  m.encoder[1].at(0, 2) = 1.0;
  m.encoder[1].at(1, 3) = 1.0;
  m.dec(1, 1).at(0, 6) = 1.0;
  m.dec(1, 1).at(1, 7) = 1.0;

  m.unembed.at(6, 2) = 1.0;
  m.unembed.at(7, 3) = -1.0;

  fx.pair.id = "disjoint-0";
  fx.pair.clean = {0};
  fx.pair.corrupted = {1};
  fx.pair.target = 2;
  fx.pair.distractor = 3;
  fx.pair.task = "custom";

  fx.path_a = {FeatureOccurrence{0, 0, 0}, FeatureOccurrence{1, 0, 0}};
  fx.path_b = {FeatureOccurrence{0, 1, 0}, FeatureOccurrence{1, 1, 0}};
  return fx;
}

ParallelWriteFixture make_parallel_write_fixture() {
  ModelConfig config;
  config.num_layers = 2;
  config.d_model = 4;
  config.vocab_size = 4;
  config.features_per_layer = 4;
  config.activation = Activation::identity;
  config.max_positions = 1;

  ParallelWriteFixture fx;
  fx.model = blank_model(config);
  ReplacementModel& m = fx.model;

  // Four layer-0 features all read ch0 and write positive multiples of ch1;
  // layer 1 is inert. Restricting a circuit scales one logit coordinate, so
  // KL to the clean distribution falls monotonically as features are added.
  m.tok_embed.at(0, 0) = 1.0;
  const double weight[4] = {0.3, 0.5, 0.7, 1.1};
  for (int f = 0; f < 4; ++f) {
    m.encoder[0].at(f, 0) = 1.0;
    m.dec(0, 0).at(f, 1) = weight[f];
  }
  m.unembed.at(1, 2) = 1.0;
  m.unembed.at(1, 3) = -1.0;

  fx.pair.id = "parallel-0";
  fx.pair.clean = {0};
  fx.pair.corrupted = {1};
  fx.pair.target = 2;
  fx.pair.distractor = 3;
  fx.pair.task = "custom";

  for (int f = 0; f < 4; ++f) fx.features.push_back(FeatureOccurrence{0, f, 0});
  return fx;
}

}  // namespace pie
