#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pie/linalg.hpp"

namespace pie {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

enum class Activation { identity, relu, jumprelu };
enum class AttentionKind { none, single_head };
enum class ErrorMode { synthetic_exact, frozen_error };

// Configuration for the synthetic cross-layer transcoder stand-in. Weights are
// a deterministic function of (config, seed); two builds with equal configs
// are bitwise identical.
struct ModelConfig {
  int num_layers = 3;
  int d_model = 16;
  int vocab_size = 64;
  int features_per_layer = 64;
  Activation activation = Activation::relu;
  double jumprelu_threshold = 0.0;
  AttentionKind attention = AttentionKind::single_head;
  ErrorMode error_mode = ErrorMode::synthetic_exact;
  std::uint64_t seed = 0;

  // Synthetic weight scheme knobs (all deterministic given seed).
  double target_fire_rate = 0.06;  // share of features active per layer
  int max_positions = 64;
  double unembed_scale = 4.0;
  double write_rms_target = 0.5;  // per-site write norm relative to embeddings
};

// One feature instance at (layer, feature index, token position). Ordering is
// lexicographic and is the global tie-break rule for every selection step.
struct FeatureOccurrence {
  int layer = 0;
  int feature = 0;
  int position = 0;
  auto operator<=>(const FeatureOccurrence&) const = default;
};

enum class PatchAction { freeze_to_corrupted, freeze_to_clean, zero, amplify };

struct PatchOp {
  PatchAction action = PatchAction::zero;
  double scale = 1.0;  // used by amplify
};

// Intervention plan: at most one action per occurrence (map key uniqueness).
// freeze_* actions read the occurrence's activation from the reference trace
// passed alongside the patch; both freeze kinds name the run the reference
// trace came from.
struct PatchSpec {
  std::map<FeatureOccurrence, PatchOp> ops;

  bool empty() const { return ops.empty(); }
  void freeze_to_corrupted(const FeatureOccurrence& occ) {
    ops[occ] = PatchOp{PatchAction::freeze_to_corrupted, 1.0};
  }
  void freeze_to_clean(const FeatureOccurrence& occ) {
    ops[occ] = PatchOp{PatchAction::freeze_to_clean, 1.0};
  }
  void zero(const FeatureOccurrence& occ) {
    ops[occ] = PatchOp{PatchAction::zero, 1.0};
  }
  void amplify(const FeatureOccurrence& occ, double scale) {
    ops[occ] = PatchOp{PatchAction::amplify, scale};
  }
};

// Additive probe at a receiver site, used by gradient verification: delta is
// added to the site-`site` write vector at `position` before it enters the
// residual stream and the unembedding stream.
struct SiteInjection {
  int site = 0;
  int position = 0;
  Vec delta;
};

// Complete record of one forward run. Holds every intermediate the backward
// pass, the relevance propagator, and the write-decomposition checks need.
struct RunTrace {
  std::string prompt_id;
  TokenSeq tokens;
  bool patched = false;

  // residual[l][t], l = 0..L; residual[0] = token + positional embedding,
  // residual[l+1] = post_attention[l] + writes[l].
  std::vector<std::vector<Vec>> residual;
  // post_attention[l][t] = residual[l][t] + attention output (or alias of
  // residual when attention is disabled).
  std::vector<std::vector<Vec>> post_attention;
  // attn_weights[l][t] has t+1 causal weights; attn_values[l][t] = Wv r_l(t).
  std::vector<std::vector<Vec>> attn_weights;
  std::vector<std::vector<Vec>> attn_values;

  // Per layer and position: pre-activations, natural activations, effective
  // (possibly patched) activations, and d(effective)/d(pre) slopes.
  std::vector<std::vector<Vec>> pre;
  std::vector<std::vector<Vec>> act;
  std::vector<std::vector<Vec>> eff;
  std::vector<std::vector<Vec>> slope;

  // writes[s][t]: site-s write vector (receiver site value accumulates these);
  // stream[t] = sum over sites of writes, read by the unembedding.
  std::vector<std::vector<Vec>> writes;
  std::vector<Vec> stream;

  std::vector<Vec> logits;
  std::vector<Vec> logprobs;
  std::vector<Vec> dist;

  int num_layers() const { return static_cast<int>(pre.size()); }
  int length() const { return static_cast<int>(tokens.size()); }
  int last() const { return length() - 1; }

  double activation_of(const FeatureOccurrence& occ) const {
    return eff[occ.layer][occ.position][occ.feature];
  }
  const Vec& last_dist() const { return dist.back(); }
  const Vec& last_logprobs() const { return logprobs.back(); }
};

enum class MetricKind { logit_difference, negative_kl };

// Scalar objective evaluated at the final position. `scale` multiplies the
// metric (selection must be equivariant under positive rescaling).
struct Metric {
  MetricKind kind = MetricKind::logit_difference;
  Token target = -1;
  Token distractor = -1;
  Vec reference;  // probability vector over the vocabulary (negative_kl)
  double scale = 1.0;
};

Metric logit_difference_metric(Token target, Token distractor, double scale = 1.0);
Metric negative_kl_metric(Vec reference, double scale = 1.0);

double metric_value(const Metric& metric, const RunTrace& trace);

// Per-site metric gradients for one run: site_grad[s][t] is the total adjoint
// of the site-s write vector at position t (residual path through later
// attention/encoders plus the direct unembedding-stream path).
struct GradientCache {
  std::string prompt_id;
  MetricKind metric_kind = MetricKind::logit_difference;
  double metric_value = 0.0;
  std::vector<std::vector<Vec>> site_grad;
};

// The synthetic subject/replacement model. In synthetic_exact mode the subject
// model IS this network run unpatched. Weights may come from the seeded build
// scheme or be set explicitly (hand-built fixtures).
struct ReplacementModel {
  ModelConfig config;
  Mat tok_embed;   // vocab x d
  Mat pos_embed;   // max_positions x d
  Mat unembed;     // d x vocab
  std::vector<Mat> encoder;       // [l]: F x d
  std::vector<Vec> encoder_bias;  // [l]: F
  // decoders[l][s - l]: F x d write matrix from layer-l features to site s,
  // defined exactly for receiver sites s in [l, L).
  std::vector<std::vector<Mat>> decoders;
  std::vector<Mat> attn_q, attn_k, attn_v;  // [l]: d x d (single_head only)
  // frozen_error[l][t]: residual error vectors recorded on a reference clean
  // run (frozen_error mode); added unconditionally to site-l writes.
  std::vector<std::vector<Vec>> frozen_error;
  bool explicit_weights = false;

  int layers() const { return config.num_layers; }
  int d() const { return config.d_model; }
  int features(int layer) const;
  const Mat& dec(int l, int s) const { return decoders[l][s - l]; }
  Mat& dec(int l, int s) { return decoders[l][s - l]; }
};

// Deterministic seeded build. Encoder biases and decoder scales are calibrated
// on seeded probe prompts so typical prompts activate roughly the configured
// share of features per layer and write norms stay moderate.
ReplacementModel build_model(const ModelConfig& config);

struct ForwardOptions {
  const PatchSpec* patch = nullptr;
  const RunTrace* reference = nullptr;
  const std::vector<SiteInjection>* injections = nullptr;
  std::string prompt_id;
};

RunTrace forward(const ReplacementModel& model, const TokenSeq& tokens,
                 const ForwardOptions& options = {});

GradientCache backward(const ReplacementModel& model, const RunTrace& trace,
                       const Metric& metric);

// Model (de)serialization. Seed-built models round-trip through (config, seed)
// alone; explicit-weight models embed full weights. Loading reproduces traces
// bit-identically either way.
void save_model(const ReplacementModel& model, const std::string& path);
ReplacementModel load_model(const std::string& path);
std::string model_config_hash(const ModelConfig& config);

}  // namespace pie
