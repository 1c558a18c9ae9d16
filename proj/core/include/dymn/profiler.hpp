#pragma once

// Closed-form MAC and parameter accounting. One MAC = one multiply + one
// accumulate; bias adds are excluded. Batch-norm, activations, pooling,
// sigmoid and softmax are element-ops: reported, but excluded from MAC
// totals. All counts assume batch 1.

#include <cstdint>
#include <string>
#include <vector>

#include "dymn/model.hpp"

namespace dymn {

struct MacEntry {
  std::string name;
  std::string kind;
  std::int64_t macs = 0;      // static-path MACs
  std::int64_t dyn_macs = 0;  // dynamic-overhead MACs (CGM, predictors,
                              // kernel aggregation, Dy-ReLU mappings, CA)
  std::int64_t params = 0;    // trainable parameters
  std::int64_t elem_ops = 0;
};

struct BlockSubtotal {
  int index = 0;  // 1-based
  std::int64_t static_macs = 0;
  std::int64_t dyn_macs = 0;
  std::int64_t params = 0;
};

struct MacReport {
  std::vector<MacEntry> layers;
  std::vector<BlockSubtotal> blocks;
  std::int64_t total_macs = 0;      // static + dynamic
  std::int64_t total_static_macs = 0;
  std::int64_t total_dyn_macs = 0;
  std::int64_t total_params = 0;
  std::int64_t total_elem_ops = 0;
};

// Pure function of (config, input extents); input is 1 x 1 x in_freq x frames.
MacReport mac_report(const ModelConfig& cfg, int frames);

// Parameter accounting only (frame-independent fields of the same report).
MacReport param_report(const ModelConfig& cfg);

std::string report_text(const MacReport& r);
std::string report_csv(const MacReport& r);  // header: layer,kind,macs,params,dyn_overhead

}  // namespace dymn
