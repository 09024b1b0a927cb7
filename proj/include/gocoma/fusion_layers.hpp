#pragma once

// Trainable wrappers that give every fusion strategy the same shape:
// Sample -> feature vector, with backward accumulating into owned gradients.

#include <memory>
#include <string_view>

#include "gocoma/baselines.hpp"
#include "gocoma/gcsa.hpp"
#include "gocoma/params.hpp"
#include "gocoma/sample.hpp"

namespace gocoma {

enum class FusionKind { code, image, concat, xattn, mobius, gcsa };

std::string_view to_string(FusionKind kind);
FusionKind parse_fusion(std::string_view name);
// Fixed reporting order.
const std::vector<FusionKind>& all_fusions();

struct FusionState {
  virtual ~FusionState() = default;
};

class FusionLayer {
 public:
  virtual ~FusionLayer() = default;
  virtual FusionKind kind() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual Vec forward(const Sample& s, std::unique_ptr<FusionState>& state) const = 0;
  virtual void backward(const FusionState& state, std::span<const double> g_out) = 0;
  virtual std::vector<ParamView> params() = 0;
};

struct FusionSpec {
  FusionKind kind = FusionKind::gcsa;
  std::size_t d_code = 0, d_img = 0;
  // Token counts; the flattening strategies need them fixed.
  std::size_t t_code = 1, t_img = 1;
  gcsa::GcsaConfig gcsa;
};

std::unique_ptr<FusionLayer> make_fusion(const FusionSpec& spec, Rng& init_rng);

// Direct access for checkpointing the hyperbolic layer.
const gcsa::GcsaParams* gcsa_params(const FusionLayer& layer);

}  // namespace gocoma
