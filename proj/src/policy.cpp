// SPDX-License-Identifier: Apache-2.0
#include "xfus/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

namespace xfus {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2)); }

double gelu_grad(double z) {
  const double phi = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
  return phi + z * kInvSqrt2Pi * std::exp(-0.5 * z * z);
}

/// y[t,:] = x[t,:] W^T for W [out, in].
void matmul_xwt(const double* x, const double* w, double* y, std::size_t T, std::size_t in,
                std::size_t out) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x + t * in;
    double* yt = y + t * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = w + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xt[i] * wo[i];
      yt[o] = acc;
    }
  }
}

/// dW[o,i] += sum_t dy[t,o] x[t,i];  dx[t,i] += sum_o dy[t,o] W[o,i].
void matmul_xwt_backward(const double* x, const double* w, const double* dy, double* dw,
                         double* dx, std::size_t T, std::size_t in, std::size_t out) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x + t * in;
    const double* dyt = dy + t * out;
    double* dxt = dx + t * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyt[o];
      if (g == 0.0) continue;
      const double* wo = w + o * in;
      double* dwo = dw + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        dwo[i] += g * xt[i];
        dxt[i] += g * wo[i];
      }
    }
  }
}

void layer_norm(const double* x, const double* g, const double* b, double* y, double* mean_out,
                double* rstd_out, std::size_t T, std::size_t D, double eps) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x + t * D;
    double mu = 0.0;
    for (std::size_t d = 0; d < D; ++d) mu += xt[d];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double c = xt[d] - mu;
      var += c * c;
    }
    var /= static_cast<double>(D);
    const double rstd = 1.0 / std::sqrt(var + eps);
    mean_out[t] = mu;
    rstd_out[t] = rstd;
    double* yt = y + t * D;
    for (std::size_t d = 0; d < D; ++d) yt[d] = g[d] * ((xt[d] - mu) * rstd) + b[d];
  }
}

void layer_norm_backward(const double* x, const double* g, const double* mean,
                         const double* rstd, const double* dy, double* dg, double* db,
                         double* dx, std::size_t T, std::size_t D) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x + t * D;
    const double* dyt = dy + t * D;
    const double mu = mean[t];
    const double r = rstd[t];
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double xhat = (xt[d] - mu) * r;
      const double dxhat = dyt[d] * g[d];
      dg[d] += dyt[d] * xhat;
      db[d] += dyt[d];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const double inv_d = 1.0 / static_cast<double>(D);
    double* dxt = dx + t * D;
    for (std::size_t d = 0; d < D; ++d) {
      const double xhat = (xt[d] - mu) * r;
      const double dxhat = dyt[d] * g[d];
      dxt[d] += r * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
    }
  }
}

}  // namespace

void softmax_row(std::span<const double> logits, std::span<double> probs) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - m);
    z += probs[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] /= z;
}

void log_softmax_row(std::span<const double> logits, std::span<double> logp) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double lse = m + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) logp[i] = logits[i] - lse;
}

void PolicyConfig::validate() const {
  if (vocab_size < 2) fail(ErrorKind::InvalidArgument, "vocab_size must be >= 2");
  if (max_seq_len < 2) fail(ErrorKind::InvalidArgument, "max_seq_len must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail(ErrorKind::InvalidArgument, "d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0) fail(ErrorKind::InvalidArgument, "n_layers must be >= 1");
  if (ff_mult == 0) fail(ErrorKind::InvalidArgument, "ff_mult must be >= 1");
  if (!(ln_eps > 0.0)) fail(ErrorKind::InvalidArgument, "ln_eps must be positive");
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> PolicyConfig::param_layout()
    const {
  const std::size_t D = d_model;
  const std::size_t F = ff_dim();
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.push_back({"embed.tok", {vocab_size, D}});
  out.push_back({"embed.pos", {max_seq_len, D}});
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "ln1.g", {D}});
    out.push_back({p + "ln1.b", {D}});
    out.push_back({p + "attn.wq", {D, D}});
    out.push_back({p + "attn.wk", {D, D}});
    out.push_back({p + "attn.wv", {D, D}});
    out.push_back({p + "attn.wo", {D, D}});
    out.push_back({p + "ln2.g", {D}});
    out.push_back({p + "ln2.b", {D}});
    out.push_back({p + "ff.up", {F, D}});
    out.push_back({p + "ff.down", {D, F}});
  }
  out.push_back({"final_norm.g", {D}});
  out.push_back({"final_norm.b", {D}});
  out.push_back({"logits.w", {vocab_size, D}});
  return out;
}

std::uint64_t PolicyConfig::digest() const {
  Fnv64 f;
  f.update_str("policy_config");
  f.update_u64(vocab_size);
  f.update_u64(max_seq_len);
  f.update_u64(d_model);
  f.update_u64(n_layers);
  f.update_u64(n_heads);
  f.update_u64(ff_mult);
  f.update_f64(ln_eps);
  return f.h;
}

NamedTensorMap init_base(const PolicyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeededRng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double sf = 1.0 / std::sqrt(static_cast<double>(cfg.ff_dim()));
  NamedTensorMap out;
  for (const auto& [name, shape] : cfg.param_layout()) {
    const std::size_t n = shape_numel(shape);
    if (name.ends_with(".g")) {
      out.set(name, Tensor::full(shape, 1.0));
      continue;
    }
    if (name.ends_with(".b")) {
      out.set(name, Tensor::zeros(shape));
      continue;
    }
    double sigma;
    if (name.starts_with("embed.")) sigma = 0.5;
    else if (name == "logits.w") sigma = 0.25 * sd;
    else if (name.ends_with("ff.down")) sigma = sf;
    else sigma = sd;
    std::vector<double> data(n);
    for (auto& v : data) v = sigma * rng.normal();
    out.set(name, Tensor::from_data(shape, std::move(data)));
  }
  return out;
}

std::span<const double> ForwardTrace::logits_row(std::size_t t) const {
  const std::size_t V = logits.size() / seq_len;
  return {logits.data() + t * V, V};
}

const std::vector<double>& BoundPolicy::weights_of(const std::string& name) const {
  if (name == "embed.tok") return tok_;
  if (name == "embed.pos") return pos_;
  if (name == "final_norm.g") return fng_;
  if (name == "final_norm.b") return fnb_;
  if (name == "logits.w") return logw_;
  if (name.starts_with("layers.")) {
    const std::size_t dot = name.find('.', 7);
    const std::size_t idx = static_cast<std::size_t>(std::stoul(name.substr(7, dot - 7)));
    const std::string rest = name.substr(dot + 1);
    const LayerW& L = layers_.at(idx);
    if (rest == "ln1.g") return L.ln1g;
    if (rest == "ln1.b") return L.ln1b;
    if (rest == "attn.wq") return L.wq;
    if (rest == "attn.wk") return L.wk;
    if (rest == "attn.wv") return L.wv;
    if (rest == "attn.wo") return L.wo;
    if (rest == "ln2.g") return L.ln2g;
    if (rest == "ln2.b") return L.ln2b;
    if (rest == "ff.up") return L.up;
    if (rest == "ff.down") return L.down;
  }
  fail(ErrorKind::KeyMismatch, "no parameter slot named '" + name + "'");
}

void BoundPolicy::bind(const NamedTensorMap& params) {
  const auto layout = cfg_.param_layout();
  if (params.size() != layout.size()) {
    std::string msg = "parameter map holds " + std::to_string(params.size()) +
                      " tensors, layout needs " + std::to_string(layout.size());
    for (const auto& [name, t] : params) {
      bool known = false;
      for (const auto& [lname, lshape] : layout) {
        if (lname == name) { known = true; break; }
      }
      if (!known) msg += "; unexpected '" + name + "'";
    }
    fail(ErrorKind::KeyMismatch, msg);
  }
  layers_.resize(cfg_.n_layers);
  for (const auto& [name, shape] : layout) {
    const Tensor& t = params.at(name);
    if (t.shape() != shape) {
      fail(ErrorKind::ShapeMismatch, "parameter '" + name + "' has shape " +
                                         shape_str(t.shape()) + ", layout needs " +
                                         shape_str(shape));
    }
    auto& slot = const_cast<std::vector<double>&>(weights_of(name));
    slot.assign(t.data().begin(), t.data().end());
  }
}

BoundPolicy::BoundPolicy(const PolicyConfig& cfg, const NamedTensorMap& params) : cfg_(cfg) {
  cfg_.validate();
  bind(params);
  fp_ = params.fingerprint();
}

BoundPolicy::BoundPolicy(const PolicyConfig& cfg, const NamedTensorMap& base,
                         const LoraAdapter& adapter)
    : cfg_(cfg) {
  cfg_.validate();
  const NamedTensorMap effective = materialize(cfg_, base, adapter);
  bind(effective);
  fp_ = effective.fingerprint();
  LoraBind lb;
  lb.scale = adapter.scale();
  lb.rank = adapter.rank;
  for (const auto& target : adapter.target_names) {
    const Tensor& A = adapter.A(target);
    const Tensor& B = adapter.B(target);
    lb.targets.push_back(target);
    lb.a.emplace_back(A.data().begin(), A.data().end());
    lb.b.emplace_back(B.data().begin(), B.data().end());
    lb.rows.push_back(B.shape()[0]);
    lb.cols.push_back(A.shape()[1]);
  }
  lora_ = std::move(lb);
}

ForwardTrace BoundPolicy::forward(std::span<const TokenId> tokens, bool cache) const {
  const std::size_t T = tokens.size();
  const std::size_t D = cfg_.d_model;
  const std::size_t F = cfg_.ff_dim();
  const std::size_t H = cfg_.n_heads;
  const std::size_t hd = cfg_.head_dim();
  const std::uint32_t V = cfg_.vocab_size;
  if (T == 0) fail(ErrorKind::InvalidArgument, "forward on empty token sequence");
  if (T > cfg_.max_seq_len) {
    fail(ErrorKind::InvalidArgument, "sequence length " + std::to_string(T) +
                                         " exceeds max_seq_len " +
                                         std::to_string(cfg_.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= V) fail(ErrorKind::InvalidArgument, "token id " + std::to_string(t) +
                                                     " outside vocabulary of " +
                                                     std::to_string(V));
  }

  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.seq_len = T;
  tr.cached = cache;
  if (cache) tr.layers.resize(cfg_.n_layers);

  std::vector<double> x(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = tok_.data() + static_cast<std::size_t>(tokens[t]) * D;
    const double* pe = pos_.data() + t * D;
    for (std::size_t d = 0; d < D; ++d) x[t * D + d] = te[d] + pe[d];
  }
  if (cache) tr.x0 = x;

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t li = 0; li < cfg_.n_layers; ++li) {
    const LayerW& L = layers_[li];
    std::vector<double> mean1(T), rstd1(T), h1(T * D);
    layer_norm(x.data(), L.ln1g.data(), L.ln1b.data(), h1.data(), mean1.data(), rstd1.data(),
               T, D, cfg_.ln_eps);

    std::vector<double> q(T * D), k(T * D), v(T * D);
    matmul_xwt(h1.data(), L.wq.data(), q.data(), T, D, D);
    matmul_xwt(h1.data(), L.wk.data(), k.data(), T, D, D);
    matmul_xwt(h1.data(), L.wv.data(), v.data(), T, D, D);

    std::vector<double> att(H * T * T, 0.0);
    std::vector<double> ctx(T * D, 0.0);
    std::vector<double> scores;
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t o0 = h * hd;
      for (std::size_t t = 0; t < T; ++t) {
        scores.assign(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          double acc = 0.0;
          const double* qt = q.data() + t * D + o0;
          const double* ks = k.data() + s * D + o0;
          for (std::size_t j = 0; j < hd; ++j) acc += qt[j] * ks[j];
          scores[s] = acc * inv_scale;
        }
        double* arow = att.data() + (h * T + t) * T;
        softmax_row(scores, {arow, t + 1});
        double* ct = ctx.data() + t * D + o0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double w = arow[s];
          const double* vs = v.data() + s * D + o0;
          for (std::size_t j = 0; j < hd; ++j) ct[j] += w * vs[j];
        }
      }
    }

    std::vector<double> attn_out(T * D);
    matmul_xwt(ctx.data(), L.wo.data(), attn_out.data(), T, D, D);
    std::vector<double> x_mid(T * D);
    for (std::size_t i = 0; i < T * D; ++i) x_mid[i] = x[i] + attn_out[i];

    std::vector<double> mean2(T), rstd2(T), h2(T * D);
    layer_norm(x_mid.data(), L.ln2g.data(), L.ln2b.data(), h2.data(), mean2.data(),
               rstd2.data(), T, D, cfg_.ln_eps);

    std::vector<double> ff_pre(T * F), ff_act(T * F);
    matmul_xwt(h2.data(), L.up.data(), ff_pre.data(), T, D, F);
    for (std::size_t i = 0; i < T * F; ++i) ff_act[i] = gelu(ff_pre[i]);
    std::vector<double> ff_out(T * D);
    matmul_xwt(ff_act.data(), L.down.data(), ff_out.data(), T, F, D);

    std::vector<double> x_out(T * D);
    for (std::size_t i = 0; i < T * D; ++i) x_out[i] = x_mid[i] + ff_out[i];

    if (cache) {
      LayerCache& c = tr.layers[li];
      c.x_in = std::move(x);
      c.ln1_mean = std::move(mean1);
      c.ln1_rstd = std::move(rstd1);
      c.h1 = std::move(h1);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.att = std::move(att);
      c.ctx = std::move(ctx);
      c.x_mid = std::move(x_mid);
      c.ln2_mean = std::move(mean2);
      c.ln2_rstd = std::move(rstd2);
      c.h2 = std::move(h2);
      c.ff_pre = std::move(ff_pre);
      c.ff_act = std::move(ff_act);
    }
    x = std::move(x_out);
  }

  std::vector<double> fmean(T), frstd(T), xf(T * D);
  layer_norm(x.data(), fng_.data(), fnb_.data(), xf.data(), fmean.data(), frstd.data(), T, D,
             cfg_.ln_eps);
  tr.logits.resize(T * V);
  matmul_xwt(xf.data(), logw_.data(), tr.logits.data(), T, D, V);
  check_finite(tr.logits, "forward logits");
  if (cache) {
    tr.fn_mean = std::move(fmean);
    tr.fn_rstd = std::move(frstd);
    tr.xf = std::move(xf);
    tr.fn_input = std::move(x);
  }
  return tr;
}

NamedTensorMap BoundPolicy::backward(const ForwardTrace& tr,
                                     std::span<const double> dlogits) const {
  if (!tr.cached) fail(ErrorKind::InvalidArgument, "backward needs a cached forward trace");
  const std::size_t T = tr.seq_len;
  const std::size_t D = cfg_.d_model;
  const std::size_t F = cfg_.ff_dim();
  const std::size_t H = cfg_.n_heads;
  const std::size_t hd = cfg_.head_dim();
  const std::uint32_t V = cfg_.vocab_size;
  if (dlogits.size() != T * V) {
    fail(ErrorKind::ShapeMismatch, "dlogits has " + std::to_string(dlogits.size()) +
                                       " entries, expected " + std::to_string(T * V));
  }

  std::map<std::string, std::vector<double>> gm;
  for (const auto& [name, shape] : cfg_.param_layout()) {
    gm.emplace(name, std::vector<double>(shape_numel(shape), 0.0));
  }

  std::vector<double> dxf(T * D, 0.0);
  matmul_xwt_backward(tr.xf.data(), logw_.data(), dlogits.data(), gm.at("logits.w").data(),
                      dxf.data(), T, D, V);

  std::vector<double> dx(T * D, 0.0);
  layer_norm_backward(tr.fn_input.data(), fng_.data(), tr.fn_mean.data(), tr.fn_rstd.data(),
                      dxf.data(), gm.at("final_norm.g").data(), gm.at("final_norm.b").data(),
                      dx.data(), T, D);

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t li = cfg_.n_layers; li-- > 0;) {
    const LayerW& L = layers_[li];
    const LayerCache& c = tr.layers[li];
    const std::string p = "layers." + std::to_string(li) + ".";

    // Feedforward sublayer: x_out = x_mid + Down(gelu(Up(h2)))
    std::vector<double> dff_act(T * F, 0.0);
    matmul_xwt_backward(c.ff_act.data(), L.down.data(), dx.data(), gm.at(p + "ff.down").data(),
                        dff_act.data(), T, F, D);
    std::vector<double> dff_pre(T * F);
    for (std::size_t i = 0; i < T * F; ++i) dff_pre[i] = dff_act[i] * gelu_grad(c.ff_pre[i]);
    std::vector<double> dh2(T * D, 0.0);
    matmul_xwt_backward(c.h2.data(), L.up.data(), dff_pre.data(), gm.at(p + "ff.up").data(),
                        dh2.data(), T, D, F);
    // dx currently holds d x_out; residual passes it to x_mid unchanged.
    layer_norm_backward(c.x_mid.data(), L.ln2g.data(), c.ln2_mean.data(), c.ln2_rstd.data(),
                        dh2.data(), gm.at(p + "ln2.g").data(), gm.at(p + "ln2.b").data(),
                        dx.data(), T, D);

    // Attention sublayer: x_mid = x_in + Wo(heads(LN1(x_in)))
    std::vector<double> dctx(T * D, 0.0);
    matmul_xwt_backward(c.ctx.data(), L.wo.data(), dx.data(), gm.at(p + "attn.wo").data(),
                        dctx.data(), T, D, D);

    std::vector<double> dq(T * D, 0.0), dk(T * D, 0.0), dv(T * D, 0.0);
    std::vector<double> datt, dscore;
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t o0 = h * hd;
      for (std::size_t t = 0; t < T; ++t) {
        const double* arow = c.att.data() + (h * T + t) * T;
        datt.assign(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vs = c.v.data() + s * D + o0;
          const double* dct = dctx.data() + t * D + o0;
          double acc = 0.0;
          for (std::size_t j = 0; j < hd; ++j) acc += dct[j] * vs[j];
          datt[s] = acc;
          double* dvs = dv.data() + s * D + o0;
          const double w = arow[s];
          for (std::size_t j = 0; j < hd; ++j) dvs[j] += w * dct[j];
        }
        double dot = 0.0;
        for (std::size_t s = 0; s <= t; ++s) dot += arow[s] * datt[s];
        dscore.assign(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) dscore[s] = arow[s] * (datt[s] - dot);
        const double* qt = c.q.data() + t * D + o0;
        double* dqt = dq.data() + t * D + o0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double g = dscore[s] * inv_scale;
          const double* ks = c.k.data() + s * D + o0;
          double* dks = dk.data() + s * D + o0;
          for (std::size_t j = 0; j < hd; ++j) {
            dqt[j] += g * ks[j];
            dks[j] += g * qt[j];
          }
        }
      }
    }

    std::vector<double> dh1(T * D, 0.0);
    matmul_xwt_backward(c.h1.data(), L.wq.data(), dq.data(), gm.at(p + "attn.wq").data(),
                        dh1.data(), T, D, D);
    matmul_xwt_backward(c.h1.data(), L.wk.data(), dk.data(), gm.at(p + "attn.wk").data(),
                        dh1.data(), T, D, D);
    matmul_xwt_backward(c.h1.data(), L.wv.data(), dv.data(), gm.at(p + "attn.wv").data(),
                        dh1.data(), T, D, D);
    layer_norm_backward(c.x_in.data(), L.ln1g.data(), c.ln1_mean.data(), c.ln1_rstd.data(),
                        dh1.data(), gm.at(p + "ln1.g").data(), gm.at(p + "ln1.b").data(),
                        dx.data(), T, D);
  }

  {
    double* dtok = gm.at("embed.tok").data();
    double* dpos = gm.at("embed.pos").data();
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t tok = tr.tokens[t];
      for (std::size_t d = 0; d < D; ++d) {
        dtok[tok * D + d] += dx[t * D + d];
        dpos[t * D + d] += dx[t * D + d];
      }
    }
  }

  NamedTensorMap out;
  if (!lora_) {
    for (const auto& [name, shape] : cfg_.param_layout()) {
      out.set(name, Tensor::from_data(shape, std::move(gm.at(name))));
    }
    return out;
  }

  const LoraBind& lb = *lora_;
  for (std::size_t i = 0; i < lb.targets.size(); ++i) {
    const std::string& target = lb.targets[i];
    const std::size_t rows = lb.rows[i];
    const std::size_t cols = lb.cols[i];
    const std::size_t r = static_cast<std::size_t>(lb.rank);
    const std::vector<double>& dweff = gm.at(target);
    const std::vector<double>& A = lb.a[i];
    const std::vector<double>& B = lb.b[i];
    std::vector<double> da(r * cols, 0.0);
    std::vector<double> db(rows * r, 0.0);
    for (std::size_t o = 0; o < rows; ++o) {
      for (std::size_t kk = 0; kk < r; ++kk) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += dweff[o * cols + j] * A[kk * cols + j];
        db[o * r + kk] = lb.scale * acc;
      }
    }
    for (std::size_t kk = 0; kk < r; ++kk) {
      for (std::size_t j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (std::size_t o = 0; o < rows; ++o) acc += B[o * r + kk] * dweff[o * cols + j];
        da[kk * cols + j] = lb.scale * acc;
      }
    }
    out.set("lora." + target + ".A", Tensor::from_data({r, cols}, std::move(da)));
    out.set("lora." + target + ".B", Tensor::from_data({rows, r}, std::move(db)));
  }
  return out;
}

std::pair<double, std::vector<double>> BoundPolicy::sequence_logprob(
    std::span<const TokenId> prompt, std::span<const TokenId> continuation) const {
  if (continuation.empty()) fail(ErrorKind::InvalidArgument, "empty continuation");
  if (prompt.empty()) fail(ErrorKind::InvalidArgument, "empty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  ForwardTrace tr = forward(seq, false);
  const std::size_t P = prompt.size();
  std::vector<double> logp_row(cfg_.vocab_size);
  std::vector<double> per_token(continuation.size());
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    log_softmax_row(tr.logits_row(P + i - 1), logp_row);
    per_token[i] = logp_row[continuation[i]];
    total += per_token[i];
  }
  return {total, std::move(per_token)};
}

std::vector<TokenId> BoundPolicy::sample(std::span<const TokenId> prompt,
                                         const SampleOptions& opts, SeededRng* rng) const {
  if (prompt.empty()) fail(ErrorKind::InvalidArgument, "empty prompt");
  if (!opts.greedy) {
    if (!(opts.temperature > 0.0)) {
      fail(ErrorKind::InvalidArgument, "temperature must be positive");
    }
    if (rng == nullptr) fail(ErrorKind::InvalidArgument, "sampling needs an rng");
  }
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  std::vector<double> probs(cfg_.vocab_size);
  bool prev_was_answer = false;
  while (out.size() < opts.max_new && seq.size() < cfg_.max_seq_len) {
    ForwardTrace tr = forward(seq, false);
    const auto row = tr.logits_row(seq.size() - 1);
    TokenId pick = 0;
    if (opts.greedy) {
      double best = row[0];
      for (std::uint32_t vtok = 1; vtok < cfg_.vocab_size; ++vtok) {
        if (row[vtok] > best) {
          best = row[vtok];
          pick = vtok;
        }
      }
    } else {
      std::vector<double> scaled(row.begin(), row.end());
      for (auto& z : scaled) z /= opts.temperature;
      softmax_row(scaled, probs);
      const double u = rng->uniform01();
      double cum = 0.0;
      pick = cfg_.vocab_size - 1;
      for (std::uint32_t vtok = 0; vtok < cfg_.vocab_size; ++vtok) {
        cum += probs[vtok];
        if (u < cum) {
          pick = vtok;
          break;
        }
      }
    }
    seq.push_back(pick);
    out.push_back(pick);
    if (prev_was_answer) break;
    prev_was_answer = std::find(opts.answer_markers.begin(), opts.answer_markers.end(),
                                pick) != opts.answer_markers.end();
  }
  return out;
}

}  // namespace xfus
