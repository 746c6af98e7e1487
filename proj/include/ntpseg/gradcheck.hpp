#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntpseg/losses.hpp"
#include "ntpseg/model.hpp"

namespace ntpseg {

struct GradcheckConfig {
  // Tiny model: vocab 32, dim 16, 2 layers, sequences of 24 tokens.
  ModelConfig model = [] {
    ModelConfig m;
    m.vocab_size = 32;
    m.dim = 16;
    m.n_layers = 2;
    m.n_heads = 4;
    m.n_kv_heads = 2;
    m.max_seq_len = 32;
    m.k_heads = 3;
    m.dropout = 0.0;
    return m;
  }();
  // Focal and weighting terms; k, m and l are taken from the fields below.
  LossConfig loss;
  int seq_len = 24;
  int documents = 2;
  int m = 3;
  int l = 4;  // small so the HET top/bottom selection is exercised
  int params_per_check = 200;
  double step = 1e-4;
  double tolerance = 1e-4;
  // Denominator floor of the relative error, so gradients at round-off
  // level do not dominate.
  double abs_floor = 1e-6;
  uint64_t seed = 7;
};

struct GradcheckResult {
  std::string name;
  size_t checked = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  bool passed = false;
};

// Checks the NTP, TCL, NkTP, HET and combined objectives in f64 against
// central differences (Richardson-extrapolated over step and step / 2).
std::vector<GradcheckResult> run_gradcheck(const GradcheckConfig& cfg);

}  // namespace ntpseg
