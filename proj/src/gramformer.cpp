#include "grl/gramformer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace grl {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
using CVec = Eigen::Map<const Vec>;
using MVec = Eigen::Map<Vec>;

constexpr double kLnEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)

struct LnIdx {
  std::size_t g, b;
};
struct AttnIdx {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FfIdx {
  std::size_t w1, b1, w2, b2;
};
struct EncIdx {
  LnIdx ln1;
  AttnIdx att;
  LnIdx ln2;
  FfIdx ff;
};
struct DecIdx {
  LnIdx ln1;
  AttnIdx self;
  LnIdx ln2;
  AttnIdx cross;
  LnIdx ln3;
  FfIdx ff;
};

// Views into a flat buffer (parameters or gradients).
struct Buf {
  double* p;
  MMap m(std::size_t off, std::size_t r, std::size_t c) const { return MMap(p + off, r, c); }
  MVec v(std::size_t off, std::size_t n) const { return MVec(p + off, n); }
};
struct CBuf {
  const double* p;
  CMap m(std::size_t off, std::size_t r, std::size_t c) const { return CMap(p + off, r, c); }
  CVec v(std::size_t off, std::size_t n) const { return CVec(p + off, n); }
};

// --- layer norm over rows ---------------------------------------------------

struct LnCache {
  Mat xhat;
  Vec rstd;
};

Mat ln_fwd(const Mat& x, CBuf P, LnIdx ix, LnCache& c) {
  const Eigen::Index d = x.cols();
  c.xhat.resize(x.rows(), d);
  c.rstd.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    c.rstd(i) = 1.0 / std::sqrt(var + kLnEps);
    c.xhat.row(i) = (x.row(i).array() - mu) * c.rstd(i);
  }
  Mat y = c.xhat.array().rowwise() * P.v(ix.g, d).transpose().array();
  y.rowwise() += P.v(ix.b, d).transpose();
  return y;
}

Mat ln_bwd(const Mat& dy, CBuf P, Buf G, LnIdx ix, const LnCache& c) {
  const Eigen::Index d = dy.cols();
  G.v(ix.g, d) += (dy.array() * c.xhat.array()).colwise().sum().transpose().matrix();
  G.v(ix.b, d) += dy.colwise().sum().transpose();
  Mat dxhat = dy.array().rowwise() * P.v(ix.g, d).transpose().array();
  Mat dx(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

// --- multi-head attention ---------------------------------------------------

struct AttnCache {
  Mat xq, xkv, q, k, v, o;
  std::vector<Mat> p;
};

Mat linear(const Mat& x, CBuf P, std::size_t w, std::size_t b, std::size_t in, std::size_t out) {
  Mat y = x * P.m(w, in, out);
  y.rowwise() += P.v(b, out).transpose();
  return y;
}

Mat attn_fwd(const Mat& xq, const Mat& xkv, CBuf P, AttnIdx ix, std::size_t d, std::size_t heads,
             AttnCache& c) {
  c.xq = xq;
  c.xkv = xkv;
  c.q = linear(xq, P, ix.wq, ix.bq, d, d);
  c.k = linear(xkv, P, ix.wk, ix.bk, d, d);
  c.v = linear(xkv, P, ix.wv, ix.bv, d, d);
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.o.resize(xq.rows(), d);
  c.p.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dh);
    const auto w = static_cast<Eigen::Index>(dh);
    Mat s = c.q.middleCols(off, w) * c.k.middleCols(off, w).transpose() * scale;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const double mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    c.o.middleCols(off, w) = s * c.v.middleCols(off, w);
    c.p[h] = std::move(s);
  }
  return linear(c.o, P, ix.wo, ix.bo, d, d);
}

void attn_bwd(const Mat& dout, CBuf P, Buf G, AttnIdx ix, std::size_t d, std::size_t heads,
              const AttnCache& c, Mat& dxq, Mat& dxkv) {
  G.m(ix.wo, d, d) += c.o.transpose() * dout;
  G.v(ix.bo, d) += dout.colwise().sum().transpose();
  const Mat d_o = dout * P.m(ix.wo, d, d).transpose();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat dq = Mat::Zero(c.q.rows(), d);
  Mat dk = Mat::Zero(c.k.rows(), d);
  Mat dv = Mat::Zero(c.v.rows(), d);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dh);
    const auto w = static_cast<Eigen::Index>(dh);
    const Mat& p = c.p[h];
    const Mat doh = d_o.middleCols(off, w);
    dv.middleCols(off, w) = p.transpose() * doh;
    const Mat dp = doh * c.v.middleCols(off, w).transpose();
    Mat ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
    ds *= scale;
    dq.middleCols(off, w) = ds * c.k.middleCols(off, w);
    dk.middleCols(off, w) = ds.transpose() * c.q.middleCols(off, w);
  }
  G.m(ix.wq, d, d) += c.xq.transpose() * dq;
  G.v(ix.bq, d) += dq.colwise().sum().transpose();
  G.m(ix.wk, d, d) += c.xkv.transpose() * dk;
  G.v(ix.bk, d) += dk.colwise().sum().transpose();
  G.m(ix.wv, d, d) += c.xkv.transpose() * dv;
  G.v(ix.bv, d) += dv.colwise().sum().transpose();
  dxq = dq * P.m(ix.wq, d, d).transpose();
  dxkv = dk * P.m(ix.wk, d, d).transpose() + dv * P.m(ix.wv, d, d).transpose();
}

// --- feed-forward with GELU -------------------------------------------------

struct FfCache {
  Mat x, h, a;
};

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluK * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * 0.044715 * x * x);
}

Mat ff_fwd(const Mat& x, CBuf P, FfIdx ix, std::size_t d, std::size_t f, FfCache& c) {
  c.x = x;
  c.h = linear(x, P, ix.w1, ix.b1, d, f);
  c.a = c.h.unaryExpr([](double v) { return gelu(v); });
  return linear(c.a, P, ix.w2, ix.b2, f, d);
}

Mat ff_bwd(const Mat& dy, CBuf P, Buf G, FfIdx ix, std::size_t d, std::size_t f, const FfCache& c) {
  G.m(ix.w2, f, d) += c.a.transpose() * dy;
  G.v(ix.b2, d) += dy.colwise().sum().transpose();
  const Mat da = dy * P.m(ix.w2, f, d).transpose();
  const Mat dh = da.array() * c.h.unaryExpr([](double v) { return gelu_grad(v); }).array();
  G.m(ix.w1, d, f) += c.x.transpose() * dh;
  G.v(ix.b1, f) += dh.colwise().sum().transpose();
  return dh * P.m(ix.w1, d, f).transpose();
}

struct EncCache {
  LnCache ln1, ln2;
  AttnCache att;
  FfCache ff;
};

struct DecCache {
  LnCache ln1, ln2, ln3;
  AttnCache self, cross;
  FfCache ff;
};

}  // namespace

struct Gramformer::Layout {
  std::size_t emb, pos;
  std::vector<EncIdx> enc;
  LnIdx enc_ln;
  std::vector<DecIdx> dec;
  LnIdx dec_ln;
  std::size_t wp, bp, wv, bv;
};

struct Gramformer::Forward {
  std::size_t variable = 0;
  std::vector<std::size_t> tokens;
  std::vector<EncCache> enc;
  LnCache enc_ln;
  Mat mem;
  std::vector<DecCache> dec;
  LnCache dec_ln;
  RowVec h_last;
  std::vector<double> policy;
  double value = 0.0;
};

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("model: d_model must be a positive multiple of heads");
  }
  if (ff == 0 || max_seq == 0) throw std::invalid_argument("model: ff and max_seq must be positive");
}

Gramformer::Gramformer(const Cfg& g, ModelConfig cfg, std::uint64_t seed)
    : g_(&g), tokens_(g), cfg_(cfg) {
  cfg_.validate();
  layout();
  init(seed);
}

void Gramformer::layout() {
  const std::size_t d = cfg_.d_model;
  const std::size_t f = cfg_.ff;
  const std::size_t r = tokens_.rule_count();
  std::size_t off = 0;
  groups_.clear();
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    groups_.push_back({name, off, rows, cols});
    const std::size_t at = off;
    off += rows * cols;
    return at;
  };
  auto ln = [&](const std::string& name) { return LnIdx{add(name + ".g", d, 1), add(name + ".b", d, 1)}; };
  auto attn = [&](const std::string& name) {
    AttnIdx a;
    a.wq = add(name + ".wq", d, d);
    a.bq = add(name + ".bq", d, 1);
    a.wk = add(name + ".wk", d, d);
    a.bk = add(name + ".bk", d, 1);
    a.wv = add(name + ".wv", d, d);
    a.bv = add(name + ".bv", d, 1);
    a.wo = add(name + ".wo", d, d);
    a.bo = add(name + ".bo", d, 1);
    return a;
  };
  auto ffw = [&](const std::string& name) {
    FfIdx x;
    x.w1 = add(name + ".w1", d, f);
    x.b1 = add(name + ".b1", f, 1);
    x.w2 = add(name + ".w2", f, d);
    x.b2 = add(name + ".b2", d, 1);
    return x;
  };
  auto lay = std::make_shared<Layout>();
  lay->emb = add("embed", vocab(), d);
  lay->pos = add("position", cfg_.max_seq, d);
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
    const std::string p = "enc" + std::to_string(i);
    EncIdx e;
    e.ln1 = ln(p + ".ln1");
    e.att = attn(p + ".attn");
    e.ln2 = ln(p + ".ln2");
    e.ff = ffw(p + ".ff");
    lay->enc.push_back(e);
  }
  lay->enc_ln = ln("enc.ln");
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "dec" + std::to_string(i);
    DecIdx e;
    e.ln1 = ln(p + ".ln1");
    e.self = attn(p + ".self");
    e.ln2 = ln(p + ".ln2");
    e.cross = attn(p + ".cross");
    e.ln3 = ln(p + ".ln3");
    e.ff = ffw(p + ".ff");
    lay->dec.push_back(e);
  }
  lay->dec_ln = ln("dec.ln");
  lay->wp = add("policy.w", d, r);
  lay->bp = add("policy.b", r, 1);
  lay->wv = add("value.w", d, 1);
  lay->bv = add("value.b", 1, 1);
  layout_ = std::move(lay);
  params_.assign(off, 0.0);
}

void Gramformer::init(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6d6f64656c));
  for (const auto& gr : groups_) {
    const auto ends_with = [&](const char* s) {
      const std::size_t n = std::strlen(s);
      return gr.name.size() >= n && gr.name.compare(gr.name.size() - n, n, s) == 0;
    };
    double* p = params_.data() + gr.offset;
    const std::size_t count = gr.rows * gr.cols;
    if (ends_with(".g")) {
      std::fill(p, p + count, 1.0);
    } else if (gr.cols == 1 && gr.name != "value.w") {
      std::fill(p, p + count, 0.0);  // biases
    } else {
      double std = cfg_.init_scale / std::sqrt(static_cast<double>(gr.rows));
      if (gr.name == "embed" || gr.name == "position") std = 0.5 * cfg_.init_scale;
      if (gr.name.rfind("policy", 0) == 0 || gr.name.rfind("value", 0) == 0) std *= 0.1;
      for (std::size_t i = 0; i < count; ++i) p[i] = std * rng.normal();
    }
  }
}

void Gramformer::zero_heads() {
  for (const auto& gr : groups_) {
    if (gr.name.rfind("policy", 0) == 0 || gr.name.rfind("value", 0) == 0) {
      std::fill_n(params_.data() + gr.offset, gr.rows * gr.cols, 0.0);
    }
  }
}

std::vector<std::size_t> Gramformer::encode_form(const SententialForm& f) const {
  std::vector<std::size_t> out;
  out.reserve(f.size());
  for (const auto& s : f) out.push_back(tokens_.symbol_token(s));
  return out;
}

std::vector<std::size_t> Gramformer::encode_state(const SearchState& s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.slots.size(); ++i) {
    if (i) out.push_back(separator_token());
    for (const auto& sym : s.slots[i]) out.push_back(tokens_.symbol_token(sym));
  }
  return out;
}

double Gramformer::forward(std::size_t variable, const std::vector<std::size_t>& tokens,
                           const std::vector<bool>& mask, Forward* keep,
                           std::vector<double>* policy) const {
  const Layout& L = *layout_;
  const std::size_t d = cfg_.d_model;
  const std::size_t r = tokens_.rule_count();
  if (tokens.empty()) throw std::invalid_argument("gramformer: empty input");
  if (tokens.size() > cfg_.max_seq) {
    throw SequenceTooLong("gramformer: sequence of " + std::to_string(tokens.size()) +
                          " tokens exceeds max_seq " + std::to_string(cfg_.max_seq));
  }
  if (variable >= tokens_.variable_count()) throw std::out_of_range("gramformer: bad variable");
  if (mask.size() != r) throw std::invalid_argument("gramformer: mask size mismatch");
  const CBuf P{params_.data()};
  Forward local;
  Forward& F = keep ? *keep : local;
  F.variable = variable;
  F.tokens = tokens;

  Mat x = (P.m(L.emb, vocab(), d).row(static_cast<Eigen::Index>(tokens_.variable_token(variable))) +
           P.m(L.pos, cfg_.max_seq, d).row(0));
  F.enc.resize(L.enc.size());
  for (std::size_t i = 0; i < L.enc.size(); ++i) {
    auto& c = F.enc[i];
    const Mat a = ln_fwd(x, P, L.enc[i].ln1, c.ln1);
    x += attn_fwd(a, a, P, L.enc[i].att, d, cfg_.heads, c.att);
    const Mat b = ln_fwd(x, P, L.enc[i].ln2, c.ln2);
    x += ff_fwd(b, P, L.enc[i].ff, d, cfg_.ff, c.ff);
  }
  F.mem = ln_fwd(x, P, L.enc_ln, F.enc_ln);

  const auto len = static_cast<Eigen::Index>(tokens.size());
  Mat y(len, d);
  for (Eigen::Index i = 0; i < len; ++i) {
    y.row(i) = P.m(L.emb, vocab(), d).row(static_cast<Eigen::Index>(tokens[i])) +
               P.m(L.pos, cfg_.max_seq, d).row(i);
  }
  F.dec.resize(L.dec.size());
  for (std::size_t i = 0; i < L.dec.size(); ++i) {
    auto& c = F.dec[i];
    const Mat a = ln_fwd(y, P, L.dec[i].ln1, c.ln1);
    y += attn_fwd(a, a, P, L.dec[i].self, d, cfg_.heads, c.self);
    const Mat b = ln_fwd(y, P, L.dec[i].ln2, c.ln2);
    y += attn_fwd(b, F.mem, P, L.dec[i].cross, d, cfg_.heads, c.cross);
    const Mat e = ln_fwd(y, P, L.dec[i].ln3, c.ln3);
    y += ff_fwd(e, P, L.dec[i].ff, d, cfg_.ff, c.ff);
  }
  const Mat h = ln_fwd(y, P, L.dec_ln, F.dec_ln);
  F.h_last = h.row(len - 1);

  const RowVec logits = F.h_last * P.m(L.wp, d, r) + P.v(L.bp, r).transpose();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < r; ++k) {
    if (mask[k]) mx = std::max(mx, logits(static_cast<Eigen::Index>(k)));
  }
  if (!std::isfinite(mx)) throw std::invalid_argument("gramformer: empty mask");
  F.policy.assign(r, 0.0);
  double z = 0.0;
  for (std::size_t k = 0; k < r; ++k) {
    if (mask[k]) z += F.policy[k] = std::exp(logits(static_cast<Eigen::Index>(k)) - mx);
  }
  for (double& p : F.policy) p /= z;
  const double pre = F.h_last.dot(P.v(L.wv, d).transpose()) + params_[L.bv];
  F.value = std::tanh(pre);
  if (policy) *policy = F.policy;
  return F.value;
}

Prediction Gramformer::predict(std::size_t variable, const std::vector<std::size_t>& tokens,
                               const std::vector<bool>& mask) const {
  Prediction out;
  out.value = forward(variable, tokens, mask, nullptr, &out.policy);
  return out;
}

PolicyValue Gramformer::evaluate(const SearchState& s, const std::vector<std::size_t>& legal) const {
  const auto slot = s.active_slot();
  if (!slot) return {};
  const auto fv = read_first_variable(s.slots[*slot]);
  std::vector<bool> mask(tokens_.rule_count(), false);
  for (std::size_t r : legal) mask[r] = true;
  const Prediction p = predict(fv->variable, encode_state(s), mask);
  PolicyValue pv;
  pv.value = p.value;
  pv.priors.reserve(legal.size());
  for (std::size_t r : legal) pv.priors.push_back(p.policy[r]);
  return pv;
}

PolicyValueFn as_policy(const Gramformer& model) {
  return [&model](const SearchState& s, const std::vector<std::size_t>& legal) {
    return model.evaluate(s, legal);
  };
}

TrainingExample Gramformer::make_example(const ReplayEntry& e) const {
  const auto slot = e.state.active_slot();
  if (!slot) throw std::invalid_argument("replay entry holds a terminal state");
  TrainingExample ex;
  ex.variable = read_first_variable(e.state.slots[*slot])->variable;
  ex.tokens = encode_state(e.state);
  ex.mask.assign(tokens_.rule_count(), false);
  ex.policy.assign(tokens_.rule_count(), 0.0);
  for (std::size_t k = 0; k < e.actions.size(); ++k) {
    ex.mask[e.actions[k]] = true;
    ex.policy[e.actions[k]] = e.policy[k];
  }
  ex.value = e.value;
  return ex;
}

LossReport Gramformer::loss(const std::vector<TrainingExample>& batch, const TrainConfig& tc,
                            std::vector<double>* grad) const {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  const Layout& L = *layout_;
  const std::size_t d = cfg_.d_model;
  const std::size_t r = tokens_.rule_count();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  if (grad) grad->resize(params_.size(), 0.0);
  const CBuf P{params_.data()};
  LossReport rep;
  Forward F;
  for (const auto& ex : batch) {
    forward(ex.variable, ex.tokens, ex.mask, &F, nullptr);
    double kl = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      if (ex.policy[k] > 0.0) kl += ex.policy[k] * (std::log(ex.policy[k]) - std::log(F.policy[k]));
    }
    const double err = F.value - ex.value;
    double vloss, dvalue;
    if (tc.huber && std::abs(err) > 1.0) {
      vloss = std::abs(err) - 0.5;
      dvalue = err > 0 ? 1.0 : -1.0;
    } else if (tc.huber) {
      vloss = 0.5 * err * err;
      dvalue = err;
    } else {
      vloss = err * err;
      dvalue = 2.0 * err;
    }
    rep.policy += kl * inv_b;
    rep.value += vloss * inv_b;
    if (!grad) continue;

    const Buf G{grad->data()};
    RowVec dlogits = RowVec::Zero(static_cast<Eigen::Index>(r));
    for (std::size_t k = 0; k < r; ++k) {
      if (ex.mask[k]) dlogits(static_cast<Eigen::Index>(k)) = tc.policy_weight * inv_b * (F.policy[k] - ex.policy[k]);
    }
    const double dpre = tc.value_weight * inv_b * dvalue * (1.0 - F.value * F.value);
    G.m(L.wp, d, r) += F.h_last.transpose() * dlogits;
    G.v(L.bp, r) += dlogits.transpose();
    G.v(L.wv, d) += dpre * F.h_last.transpose();
    (*grad)[L.bv] += dpre;
    const RowVec dh_last = dlogits * P.m(L.wp, d, r).transpose() + dpre * P.v(L.wv, d).transpose();

    const auto len = static_cast<Eigen::Index>(ex.tokens.size());
    Mat dh = Mat::Zero(len, d);
    dh.row(len - 1) = dh_last;
    Mat dy = ln_bwd(dh, P, G, L.dec_ln, F.dec_ln);
    Mat dmem = Mat::Zero(F.mem.rows(), d);
    for (std::size_t i = L.dec.size(); i-- > 0;) {
      const auto& c = F.dec[i];
      const auto& ix = L.dec[i];
      dy += ln_bwd(ff_bwd(dy, P, G, ix.ff, d, cfg_.ff, c.ff), P, G, ix.ln3, c.ln3);
      Mat dq, dkv;
      attn_bwd(dy, P, G, ix.cross, d, cfg_.heads, c.cross, dq, dkv);
      dmem += dkv;
      dy += ln_bwd(dq, P, G, ix.ln2, c.ln2);
      attn_bwd(dy, P, G, ix.self, d, cfg_.heads, c.self, dq, dkv);
      dy += ln_bwd(dq + dkv, P, G, ix.ln1, c.ln1);
    }
    for (Eigen::Index i = 0; i < len; ++i) {
      G.m(L.emb, vocab(), d).row(static_cast<Eigen::Index>(ex.tokens[i])) += dy.row(i);
      G.m(L.pos, cfg_.max_seq, d).row(i) += dy.row(i);
    }
    Mat dx = ln_bwd(dmem, P, G, L.enc_ln, F.enc_ln);
    for (std::size_t i = L.enc.size(); i-- > 0;) {
      const auto& c = F.enc[i];
      const auto& ix = L.enc[i];
      dx += ln_bwd(ff_bwd(dx, P, G, ix.ff, d, cfg_.ff, c.ff), P, G, ix.ln2, c.ln2);
      Mat dq, dkv;
      attn_bwd(dx, P, G, ix.att, d, cfg_.heads, c.att, dq, dkv);
      dx += ln_bwd(dq + dkv, P, G, ix.ln1, c.ln1);
    }
    G.m(L.emb, vocab(), d).row(static_cast<Eigen::Index>(tokens_.variable_token(ex.variable))) += dx.row(0);
    G.m(L.pos, cfg_.max_seq, d).row(0) += dx.row(0);
  }
  rep.total = tc.policy_weight * rep.policy + tc.value_weight * rep.value;
  return rep;
}

void adam_step(std::vector<double>& params, const std::vector<double>& grad, AdamState& adam,
               const TrainConfig& tc) {
  if (adam.m.size() != params.size()) {
    adam.m.assign(params.size(), 0.0);
    adam.v.assign(params.size(), 0.0);
    adam.step = 0;
  }
  ++adam.step;
  const double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(adam.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam.m[i] = tc.beta1 * adam.m[i] + (1.0 - tc.beta1) * grad[i];
    adam.v[i] = tc.beta2 * adam.v[i] + (1.0 - tc.beta2) * grad[i] * grad[i];
    params[i] -= tc.lr * (adam.m[i] / c1) / (std::sqrt(adam.v[i] / c2) + tc.eps);
  }
}

std::vector<LossReport> train(Gramformer& model, const std::vector<TrainingExample>& data,
                              const TrainConfig& tc, AdamState& adam) {
  if (data.empty()) throw std::invalid_argument("train: empty buffer");
  if (!(tc.lr >= 0.0)) throw std::invalid_argument("train: learning rate must be non-negative");
  const std::size_t batch = std::max<std::size_t>(1, tc.batch);
  Rng rng(mix_seed(tc.seed, 0x747261696e));
  std::vector<std::size_t> order(data.size());
  std::vector<LossReport> losses;
  std::vector<double> grad;
  std::vector<TrainingExample> mb;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      mb.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) mb.push_back(data[order[k]]);
      grad.assign(model.param_count(), 0.0);
      const LossReport rep = model.loss(mb, tc, &grad);
      if (!std::isfinite(rep.total)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              " (non-finite loss)");
      }
      losses.push_back(rep);
      if (tc.lr > 0.0) adam_step(model.params(), grad, adam, tc);
    }
  }
  return losses;
}

std::string generate_sentence(const Gramformer& model, std::size_t c_max, Rng* rng,
                              double temperature) {
  const Cfg& g = model.grammar();
  SententialForm form = g.start_form();
  std::vector<bool> mask(model.tokens().rule_count());
  while (auto fv = read_first_variable(form)) {
    const auto legal = legal_rules(g, form, c_max);
    if (legal.empty()) throw GrammarError("no rule fits within c_max");
    std::fill(mask.begin(), mask.end(), false);
    for (std::size_t r : legal) mask[r] = true;
    const Prediction p = model.predict(fv->variable, model.encode_form(form), mask);
    std::size_t pick = legal.front();
    if (rng) {
      std::vector<double> w(legal.size());
      double total = 0.0;
      for (std::size_t k = 0; k < legal.size(); ++k) {
        total += w[k] = std::pow(std::max(p.policy[legal[k]], 1e-300), 1.0 / temperature);
      }
      double u = rng->uniform() * total;
      pick = legal.back();
      for (std::size_t k = 0; k < legal.size(); ++k) {
        if ((u -= w[k]) < 0.0) {
          pick = legal[k];
          break;
        }
      }
    } else {
      for (std::size_t r : legal) {
        if (p.policy[r] > p.policy[pick]) pick = r;
      }
    }
    form = replace(g, form, fv->position, pick);
  }
  return g.render(form);
}

GradCheck gradient_check(Gramformer& model, const std::vector<TrainingExample>& batch,
                         const TrainConfig& tc, double h, std::size_t stride) {
  std::vector<double> grad(model.param_count(), 0.0);
  model.loss(batch, tc, &grad);
  GradCheck out;
  auto& p = model.params();
  for (const auto& gr : model.groups()) {
    for (std::size_t i = gr.offset; i < gr.offset + gr.rows * gr.cols; i += std::max<std::size_t>(1, stride)) {
      const double keep = p[i];
      p[i] = keep + h;
      const double up = model.loss(batch, tc, nullptr).total;
      p[i] = keep - h;
      const double down = model.loss(batch, tc, nullptr).total;
      p[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
      const double rel = std::abs(numeric - grad[i]) / denom;
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_group = gr.name;
      }
    }
  }
  return out;
}

// --- checkpoints --------------------------------------------------------------

void Gramformer::save(const std::filesystem::path& file, const AdamState* adam) const {
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    const bool with_adam = adam && adam->m.size() == params_.size();
    out << "GRLMODEL 1\n"
        << "d_model " << cfg_.d_model << "\nheads " << cfg_.heads << "\nenc_layers " << cfg_.enc_layers
        << "\ndec_layers " << cfg_.dec_layers << "\nff " << cfg_.ff << "\nmax_seq " << cfg_.max_seq
        << "\nvocab " << vocab() << "\nrules " << tokens_.rule_count() << "\nparams " << params_.size()
        << "\nadam_step " << (with_adam ? adam->step : 0) << "\nadam " << (with_adam ? 1 : 0) << "\nend\n";
    auto dump = [&](const std::vector<double>& v) {
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    };
    dump(params_);
    if (with_adam) {
      dump(adam->m);
      dump(adam->v);
    }
    if (!out) throw std::runtime_error("write failed on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, file);
}

Gramformer Gramformer::load(const Cfg& g, const std::filesystem::path& file, AdamState* adam) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + file.string());
  std::string line;
  std::getline(in, line);
  if (line != "GRLMODEL 1") throw std::runtime_error(file.string() + ": not a model checkpoint");
  ModelConfig cfg;
  std::size_t vocab = 0, rules = 0, count = 0, with_adam = 0;
  std::uint64_t step = 0;
  while (std::getline(in, line) && line != "end") {
    std::istringstream ss(line);
    std::string key;
    std::uint64_t value = 0;
    if (!(ss >> key >> value)) throw std::runtime_error(file.string() + ": bad header line '" + line + "'");
    if (key == "d_model") cfg.d_model = value;
    else if (key == "heads") cfg.heads = value;
    else if (key == "enc_layers") cfg.enc_layers = value;
    else if (key == "dec_layers") cfg.dec_layers = value;
    else if (key == "ff") cfg.ff = value;
    else if (key == "max_seq") cfg.max_seq = value;
    else if (key == "vocab") vocab = value;
    else if (key == "rules") rules = value;
    else if (key == "params") count = value;
    else if (key == "adam_step") step = value;
    else if (key == "adam") with_adam = value;
    else throw std::runtime_error(file.string() + ": unknown header key '" + key + "'");
  }
  Gramformer m(g, cfg, 0);
  if (m.vocab() != vocab || m.tokens().rule_count() != rules || m.param_count() != count) {
    throw std::runtime_error(file.string() + ": checkpoint does not match the grammar/model shape");
  }
  auto slurp = [&](std::vector<double>& v) {
    v.resize(count);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double))) {
      throw std::runtime_error(file.string() + ": truncated payload");
    }
  };
  slurp(m.params_);
  if (with_adam && adam) {
    slurp(adam->m);
    slurp(adam->v);
    adam->step = step;
  }
  return m;
}

}  // namespace grl
