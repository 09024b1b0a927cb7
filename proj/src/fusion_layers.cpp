#include "gocoma/fusion_layers.hpp"

#include <string>

#include "gocoma/errors.hpp"

namespace gocoma {

namespace {

using baselines::flatten;

void check_tokens(const std::vector<Vec>& seq, std::size_t t, std::size_t d, const char* what) {
  if (seq.size() != t)
    throw InvalidInput(std::string(what) + ": expected " + std::to_string(t) + " tokens, got " +
                       std::to_string(seq.size()));
  for (const auto& tok : seq)
    if (tok.size() != d) throw InvalidInput(std::string(what) + ": token dimension mismatch");
}

ParamView view(std::string name, Vec& value, Vec& grad) { return {std::move(name), value, grad}; }
ParamView view(std::string name, Matrix& value, Matrix& grad) {
  return {std::move(name), value.values(), grad.values()};
}

// --- stateless strategies: unimodal and concatenation ---

class FlatLayer final : public FusionLayer {
 public:
  FlatLayer(FusionKind kind, const FusionSpec& s) : kind_(kind), spec_(s) {}
  FusionKind kind() const override { return kind_; }
  std::size_t output_dim() const override {
    const std::size_t code = spec_.t_code * spec_.d_code, img = spec_.t_img * spec_.d_img;
    if (kind_ == FusionKind::code) return code;
    if (kind_ == FusionKind::image) return img;
    return code + img;
  }
  Vec forward(const Sample& s, std::unique_ptr<FusionState>& state) const override {
    state.reset();
    if (kind_ != FusionKind::image) check_tokens(s.code, spec_.t_code, spec_.d_code, "code tokens");
    if (kind_ != FusionKind::code) check_tokens(s.image, spec_.t_img, spec_.d_img, "image tokens");
    if (kind_ == FusionKind::code) return flatten(s.code);
    if (kind_ == FusionKind::image) return flatten(s.image);
    return baselines::baseline_concat(flatten(s.code), flatten(s.image));
  }
  void backward(const FusionState&, std::span<const double>) override {}
  std::vector<ParamView> params() override { return {}; }

 private:
  FusionKind kind_;
  FusionSpec spec_;
};

// --- Euclidean cross-attention ---

struct XattnBox final : FusionState {
  baselines::XattnState st;
};

class XattnLayer final : public FusionLayer {
 public:
  XattnLayer(const FusionSpec& s, Rng& rng)
      : p_(baselines::XattnParams::init(s.d_code, s.d_img, s.gcsa.d_model, rng)), g_(p_) {
    zero_grads(params());
  }
  FusionKind kind() const override { return FusionKind::xattn; }
  std::size_t output_dim() const override { return 2 * p_.d_model(); }
  Vec forward(const Sample& s, std::unique_ptr<FusionState>& state) const override {
    auto box = std::make_unique<XattnBox>();
    box->st = baselines::baseline_euclid_xattn(s.code, s.image, p_);
    Vec out = box->st.out;
    state = std::move(box);
    return out;
  }
  void backward(const FusionState& state, std::span<const double> g_out) override {
    const auto& st = dynamic_cast<const XattnBox&>(state).st;
    const auto g = baselines::euclid_xattn_backward(p_, st, g_out);
    axpy(1.0, g.w_q.values(), g_.w_q.values());
    axpy(1.0, g.w_k.values(), g_.w_k.values());
    axpy(1.0, g.w_v.values(), g_.w_v.values());
    axpy(1.0, g.b_q, g_.b_q);
    axpy(1.0, g.b_k, g_.b_k);
    axpy(1.0, g.b_v, g_.b_v);
  }
  std::vector<ParamView> params() override {
    return {view("xattn.w_q", p_.w_q, g_.w_q), view("xattn.b_q", p_.b_q, g_.b_q),
            view("xattn.w_k", p_.w_k, g_.w_k), view("xattn.b_k", p_.b_k, g_.b_k),
            view("xattn.w_v", p_.w_v, g_.w_v), view("xattn.b_v", p_.b_v, g_.b_v)};
  }

 private:
  baselines::XattnParams p_;
  baselines::XattnParams g_;
};

// --- Mobius-addition fusion over flattened sequences ---

struct MobiusBox final : FusionState {
  baselines::MobiusFuseState st;
};

class MobiusLayer final : public FusionLayer {
 public:
  MobiusLayer(const FusionSpec& s, Rng& rng)
      : spec_(s),
        p_(baselines::MobiusFuseParams::init(s.t_code * s.d_code, s.t_img * s.d_img, s.gcsa.d_model,
                                             geo::Curvature(s.gcsa.curvature), rng)),
        g_(p_) {
    zero_grads(params());
  }
  FusionKind kind() const override { return FusionKind::mobius; }
  std::size_t output_dim() const override { return p_.output_dim(spec_.t_code * spec_.d_code); }
  Vec forward(const Sample& s, std::unique_ptr<FusionState>& state) const override {
    check_tokens(s.code, spec_.t_code, spec_.d_code, "code tokens");
    check_tokens(s.image, spec_.t_img, spec_.d_img, "image tokens");
    auto box = std::make_unique<MobiusBox>();
    box->st = baselines::mobius_fuse_forward(flatten(s.code), flatten(s.image), p_);
    Vec out = box->st.out;
    state = std::move(box);
    return out;
  }
  void backward(const FusionState& state, std::span<const double> g_out) override {
    if (!p_.projected()) return;
    const auto g = baselines::mobius_fuse_backward(p_, dynamic_cast<const MobiusBox&>(state).st, g_out);
    axpy(1.0, g.proj_code.values(), g_.proj_code.values());
    axpy(1.0, g.proj_img.values(), g_.proj_img.values());
  }
  std::vector<ParamView> params() override {
    if (!p_.projected()) return {};
    return {view("mobius.proj_code", p_.proj_code, g_.proj_code),
            view("mobius.proj_img", p_.proj_img, g_.proj_img)};
  }

 private:
  FusionSpec spec_;
  baselines::MobiusFuseParams p_;
  baselines::MobiusFuseParams g_;
};

// --- GCSA ---

struct GcsaBox final : FusionState {
  gcsa::GcsaState st;
};

class GcsaLayer final : public FusionLayer {
 public:
  GcsaLayer(const FusionSpec& s, Rng& rng)
      : p_(gcsa::GcsaParams::init(s.d_code, s.d_img, s.gcsa, rng)), g_(gcsa::GcsaGrads::zeros_like(p_)) {}
  FusionKind kind() const override { return FusionKind::gcsa; }
  std::size_t output_dim() const override { return p_.d_model(); }
  Vec forward(const Sample& s, std::unique_ptr<FusionState>& state) const override {
    auto box = std::make_unique<GcsaBox>();
    box->st = gcsa::gcsa_forward(s.code, s.image, p_);
    Vec out = box->st.out.z_euc;
    state = std::move(box);
    return out;
  }
  void backward(const FusionState& state, std::span<const double> g_out) override {
    g_.accumulate(gcsa::gcsa_backward(p_, dynamic_cast<const GcsaBox&>(state).st, g_out));
  }
  std::vector<ParamView> params() override {
    std::vector<ParamView> out{view("gcsa.w_q", p_.w_q, g_.w_q), view("gcsa.b_q", p_.b_q, g_.b_q),
                               view("gcsa.w_k", p_.w_k, g_.w_k), view("gcsa.b_k", p_.b_k, g_.b_k),
                               view("gcsa.w_v", p_.w_v, g_.w_v), view("gcsa.b_v", p_.b_v, g_.b_v)};
    if (p_.symmetric_values) {
      out.push_back(view("gcsa.w_v_code", p_.w_v_code, g_.w_v_code));
      out.push_back(view("gcsa.b_v_code", p_.b_v_code, g_.b_v_code));
    }
    out.push_back({"gcsa.lambda", std::span<double>(&p_.lambda, 1), std::span<double>(&g_.lambda, 1)});
    return out;
  }
  const gcsa::GcsaParams& raw() const { return p_; }

 private:
  gcsa::GcsaParams p_;
  gcsa::GcsaGrads g_;
};

}  // namespace

std::string_view to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::code: return "code";
    case FusionKind::image: return "image";
    case FusionKind::concat: return "concat";
    case FusionKind::xattn: return "xattn";
    case FusionKind::mobius: return "mobius";
    case FusionKind::gcsa: return "gcsa";
  }
  return "?";
}

FusionKind parse_fusion(std::string_view name) {
  for (FusionKind k : all_fusions())
    if (to_string(k) == name) return k;
  if (name == "euclid-xattn") return FusionKind::xattn;
  if (name == "unimodal-code") return FusionKind::code;
  if (name == "unimodal-image") return FusionKind::image;
  throw InvalidInput("unknown fusion '" + std::string(name) + "'");
}

const std::vector<FusionKind>& all_fusions() {
  static const std::vector<FusionKind> order{FusionKind::code,  FusionKind::image,  FusionKind::concat,
                                             FusionKind::xattn, FusionKind::mobius, FusionKind::gcsa};
  return order;
}

std::unique_ptr<FusionLayer> make_fusion(const FusionSpec& spec, Rng& init_rng) {
  if (spec.d_code == 0 || spec.d_img == 0 || spec.t_code == 0 || spec.t_img == 0)
    throw InvalidInput("make_fusion: sizes must be positive");
  switch (spec.kind) {
    case FusionKind::code:
    case FusionKind::image:
    case FusionKind::concat: return std::make_unique<FlatLayer>(spec.kind, spec);
    case FusionKind::xattn: return std::make_unique<XattnLayer>(spec, init_rng);
    case FusionKind::mobius: return std::make_unique<MobiusLayer>(spec, init_rng);
    case FusionKind::gcsa: return std::make_unique<GcsaLayer>(spec, init_rng);
  }
  throw InvalidInput("make_fusion: unknown kind");
}

const gcsa::GcsaParams* gcsa_params(const FusionLayer& layer) {
  const auto* g = dynamic_cast<const GcsaLayer*>(&layer);
  return g ? &g->raw() : nullptr;
}

}  // namespace gocoma
