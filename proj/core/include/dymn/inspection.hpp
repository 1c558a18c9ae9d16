#pragma once

// Probing the trained dynamic components: apply coefficients computed from a
// different recording (a seeded batch derangement), shuffle them along named
// axes, or replace kernel attention outright, then measure the metric drop.

#include <string>
#include <vector>

#include "dymn/metrics.hpp"
#include "dymn/training.hpp"

namespace dymn {

enum class InspectTarget { ca, dyconv, dyrelu };
enum class InspectMethod {
  identity,  // debug no-op: applies the identity permutation
  context_shuffle,
  channel_shuffle,
  spatial_shuffle,
  time_shuffle,
  frequency_shuffle,
  attention_shuffle,
  uniform_attention,
  max_attention,
};

InspectTarget inspect_target_from_string(const std::string& s);
InspectMethod inspect_method_from_string(const std::string& s);
std::string inspect_target_to_string(InspectTarget t);
std::string inspect_method_to_string(InspectMethod m);

// Valid (target, method) pairs follow the probing table: CA admits context /
// channel / spatial / time / frequency shuffles, Dy-Conv admits context and
// attention shuffles plus uniform and max attention, Dy-ReLU admits context
// and channel shuffles. identity is valid everywhere.
bool method_valid_for(InspectTarget t, InspectMethod m);

struct InspectionConfig {
  InspectTarget target = InspectTarget::ca;
  InspectMethod method = InspectMethod::identity;
  unsigned seed = 0;
  std::vector<int> blocks;  // 1-based; empty = every block carrying the target

  void validate() const {
    if (!method_valid_for(target, method))
      throw ConfigError("method '" + inspect_method_to_string(method) +
                        "' is not valid for target '" + inspect_target_to_string(target) + "'");
  }
};

// Builds the mutation hooks realizing one inspection config. The hook state
// (rng) lives in the returned object; keep it alive while evaluating.
class InspectionProbe {
 public:
  InspectionProbe(const InspectionConfig& cfg);
  ForwardHooks<float>* hooks() { return &hooks_; }

 private:
  bool block_selected(int block) const;
  InspectionConfig cfg_;
  std::mt19937 rng_;
  ForwardHooks<float> hooks_;
};

struct PerturbedEval {
  double baseline_accuracy = 0;
  double baseline_map = 0;
  double perturbed_accuracy = 0;
  double perturbed_map = 0;
};

PerturbedEval perturbed_eval(Model<float>& model, const std::vector<ClipExample>& data,
                             const MelConfig& mel_cfg, const InspectionConfig& cfg,
                             int batch_size = 16);

struct MappingSample {
  int block = 0;
  float input = 0;
  float output = 0;
};

// Records (pre-activation, post-activation) scalar pairs from the Dy-ReLU at
// the chosen blocks, uniformly subsampled to about n_samples per block.
std::vector<MappingSample> capture_dyrelu_mappings(Model<float>& model,
                                                   const std::vector<ClipExample>& data,
                                                   const MelConfig& mel_cfg,
                                                   const std::vector<int>& blocks,
                                                   int n_samples, unsigned seed);

std::string mappings_csv(const std::vector<MappingSample>& samples);

// Seeded permutation of {0..n-1} with no fixed points (n >= 2).
std::vector<int> derangement(int n, std::mt19937& rng);

}  // namespace dymn
