#include "xcot/policy.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>

#include "kernels.hpp"
#include "parallel.hpp"
#include "xcot/error.hpp"
#include "xcot/util.hpp"

namespace xcot::policy {

namespace k = kernels;

// ---------------------------------------------------------------------------
// Configuration and layout

void PolicyConfig::check() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || mlp_ratio == 0 ||
      context_len == 0) {
    throw ConfigError("policy dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (!(init_scale >= 0.0f) || !std::isfinite(init_scale)) {
    throw ConfigError("init_scale must be finite and non-negative");
  }
}

namespace {

// 0.02f prints as 0.02 rather than 0.019999999552965164.
double shortest_double(float f) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, f);
  return std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
}

}  // namespace

nlohmann::json to_json(const PolicyConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
          {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"mlp_ratio", c.mlp_ratio},     {"context_len", c.context_len},
          {"init_scale", shortest_double(c.init_scale)},   {"tied_embeddings", c.tied_embeddings},
          {"trace_style", format::style_name(c.trace_style)}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<std::uint32_t>();
    else if (key == "d_model") c.d_model = value.get<std::uint32_t>();
    else if (key == "n_layers") c.n_layers = value.get<std::uint32_t>();
    else if (key == "n_heads") c.n_heads = value.get<std::uint32_t>();
    else if (key == "mlp_ratio") c.mlp_ratio = value.get<std::uint32_t>();
    else if (key == "context_len") c.context_len = value.get<std::uint32_t>();
    else if (key == "init_scale") c.init_scale = value.get<float>();
    else if (key == "tied_embeddings") c.tied_embeddings = value.get<bool>();
    else if (key == "trace_style") c.trace_style = format::style_from_name(value.get<std::string>());
    else throw ConfigError("unknown policy key '" + key + "'");
  }
  c.check();
  return c;
}

Layout::Layout(const PolicyConfig& c) {
  c.check();
  const std::size_t V = c.vocab_size, d = c.d_model, h = c.hidden();
  auto add = [this](std::string name, std::vector<std::size_t> dims) {
    std::size_t n = 1;
    for (auto x : dims) n *= x;
    tensors.push_back({std::move(name), std::move(dims), total, n});
    total += n;
    return tensors.back().offset;
  };
  wte = add("wte", {V, d});
  wpe = add("wpe", {c.context_len, d});
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    const auto p = "h" + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = add(p + "ln1.g", {d});
    b.ln1_b = add(p + "ln1.b", {d});
    b.w_qkv = add(p + "attn.w_qkv", {d, 3 * d});
    b.b_qkv = add(p + "attn.b_qkv", {3 * d});
    b.w_out = add(p + "attn.w_out", {d, d});
    b.b_out = add(p + "attn.b_out", {d});
    b.ln2_g = add(p + "ln2.g", {d});
    b.ln2_b = add(p + "ln2.b", {d});
    b.w_fc = add(p + "mlp.w_fc", {d, h});
    b.b_fc = add(p + "mlp.b_fc", {h});
    b.w_proj = add(p + "mlp.w_proj", {h, d});
    b.b_proj = add(p + "mlp.b_proj", {d});
    blocks.push_back(b);
  }
  lnf_g = add("lnf.g", {d});
  lnf_b = add("lnf.b", {d});
  lm_head = c.tied_embeddings ? wte : add("lm_head", {d, V});
}

template <typename S>
Params<S>::Params(const PolicyConfig& config)
    : config_(config), layout_(std::make_shared<const Layout>(config)) {
  values_.assign(layout_->total, S(0));
}

template <typename S>
std::span<S> Params<S>::tensor(std::string_view name) {
  for (const auto& t : layout_->tensors) {
    if (t.name == name) return std::span<S>(values_).subspan(t.offset, t.size);
  }
  throw Error("no tensor named " + std::string(name));
}

template <typename S>
std::span<const S> Params<S>::tensor(std::string_view name) const {
  for (const auto& t : layout_->tensors) {
    if (t.name == name) return std::span<const S>(values_).subspan(t.offset, t.size);
  }
  throw Error("no tensor named " + std::string(name));
}

template class Params<float>;
template class Params<double>;

Params<float> init(const PolicyConfig& config, std::uint64_t seed) {
  Params<float> p(config);
  Rng rng(derive_seed(seed, 0x1417));
  for (const auto& t : p.layout().tensors) {
    auto dst = p.values().subspan(t.offset, t.size);
    auto tail = std::string_view(t.name).substr(t.name.rfind('.') + 1);
    if (tail == "g") {
      std::fill(dst.begin(), dst.end(), 1.0f);
    } else if (tail == "b" || tail.starts_with("b_")) {
      std::fill(dst.begin(), dst.end(), 0.0f);
    } else {
      for (auto& v : dst) v = static_cast<float>(rng.normal() * config.init_scale);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename S>
struct LayerCache {
  std::vector<S> ln1, mean1, rstd1, qkv, kt, probs, att, mid, ln2, mean2, rstd2, fc_pre, fc_act;
};

template <typename S>
struct Workspace {
  std::size_t len = 0;
  std::vector<std::vector<S>> resid;  // n_layers + 1 residual streams
  std::vector<LayerCache<S>> layers;
  std::vector<S> lnf, meanf, rstdf, logits, scratch;

  void resize(const PolicyConfig& c, std::size_t T) {
    len = T;
    const std::size_t d = c.d_model, h = c.hidden(), H = c.n_heads;
    resid.resize(c.n_layers + 1);
    for (auto& r : resid) r.resize(T * d);
    layers.resize(c.n_layers);
    for (auto& l : layers) {
      l.ln1.resize(T * d);
      l.mean1.resize(T);
      l.rstd1.resize(T);
      l.qkv.resize(T * 3 * d);
      l.kt.resize(d * T);
      l.probs.resize(H * T * T);
      l.att.resize(T * d);
      l.mid.resize(T * d);
      l.ln2.resize(T * d);
      l.mean2.resize(T);
      l.rstd2.resize(T);
      l.fc_pre.resize(T * h);
      l.fc_act.resize(T * h);
    }
    lnf.resize(T * d);
    meanf.resize(T);
    rstdf.resize(T);
    logits.resize(T * c.vocab_size);
    scratch.resize(T * std::max<std::size_t>(h, d));
  }
};

/// Weights that the forward/backward passes need in transposed form.
template <typename S>
struct Transposed {
  std::vector<S> head;                           // d x V (forward, tied only)
  std::vector<S> head_t;                         // V x d (backward)
  std::vector<std::vector<S>> qkv, out, fc, proj;  // per block, transposed

  Transposed(const Params<S>& p, bool for_backward) {
    const auto& c = p.config();
    const auto& L = p.layout();
    const std::size_t V = c.vocab_size, d = c.d_model, h = c.hidden();
    const S* w = p.data();
    if (c.tied_embeddings) {
      head.resize(d * V);
      k::transpose(head.data(), w + L.wte, V, d);
    }
    if (!for_backward) return;
    head_t.resize(V * d);
    if (c.tied_embeddings) {
      std::copy(w + L.wte, w + L.wte + V * d, head_t.begin());
    } else {
      k::transpose(head_t.data(), w + L.lm_head, d, V);
    }
    for (const auto& b : L.blocks) {
      qkv.emplace_back(3 * d * d);
      k::transpose(qkv.back().data(), w + b.w_qkv, d, 3 * d);
      out.emplace_back(d * d);
      k::transpose(out.back().data(), w + b.w_out, d, d);
      fc.emplace_back(h * d);
      k::transpose(fc.back().data(), w + b.w_fc, d, h);
      proj.emplace_back(d * h);
      k::transpose(proj.back().data(), w + b.w_proj, h, d);
    }
  }

  const S* head_weights(const Params<S>& p) const {
    return p.config().tied_embeddings ? head.data() : p.data() + p.layout().lm_head;
  }
};

void check_context(const PolicyConfig& c, std::size_t len) {
  if (len > c.context_len) {
    throw ContextTooLong("sequence of " + std::to_string(len) + " tokens exceeds context_len " +
                         std::to_string(c.context_len));
  }
  if (len == 0) throw Error("empty token sequence");
}

template <typename S>
void run_forward(const Params<S>& p, const Transposed<S>& tw, std::span<const TokenId> tokens,
                 Workspace<S>& ws) {
  const auto& c = p.config();
  const auto& L = p.layout();
  check_context(c, tokens.size());
  const std::size_t T = tokens.size(), d = c.d_model, h = c.hidden(), H = c.n_heads;
  const std::size_t hd = c.head_dim(), V = c.vocab_size;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  ws.resize(c, T);
  const S* w = p.data();

  auto& x0 = ws.resid[0];
  for (std::size_t t = 0; t < T; ++t) {
    if (tokens[t].value >= V) throw OutOfRange("token id " + std::to_string(tokens[t].value));
    const S* te = w + L.wte + tokens[t].value * d;
    const S* pe = w + L.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) x0[t * d + i] = te[i] + pe[i];
  }

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& b = L.blocks[l];
    auto& lc = ws.layers[l];
    const auto& x = ws.resid[l];
    auto& next = ws.resid[l + 1];
    k::layernorm(lc.ln1.data(), lc.mean1.data(), lc.rstd1.data(), x.data(), w + b.ln1_g,
                 w + b.ln1_b, T, d);
    k::matmul(lc.qkv.data(), lc.ln1.data(), w + b.w_qkv, w + b.b_qkv, T, d, 3 * d);
    const S* qkv = lc.qkv.data();
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < d; ++i) lc.kt[i * T + t] = qkv[t * 3 * d + d + i];
    }
    for (std::size_t head = 0; head < H; ++head) {
      for (std::size_t t = 0; t < T; ++t) {
        k::attend_row(lc.att.data() + t * d + head * hd, lc.probs.data() + (head * T + t) * T,
                      qkv + t * 3 * d + head * hd, lc.kt.data() + head * hd * T, T,
                      qkv + 2 * d + head * hd, 3 * d, t + 1, hd, scale);
      }
    }
    S* tmp = ws.scratch.data();
    k::matmul(tmp, lc.att.data(), w + b.w_out, w + b.b_out, T, d, d);
    for (std::size_t i = 0; i < T * d; ++i) lc.mid[i] = x[i] + tmp[i];
    k::layernorm(lc.ln2.data(), lc.mean2.data(), lc.rstd2.data(), lc.mid.data(), w + b.ln2_g,
                 w + b.ln2_b, T, d);
    k::matmul(lc.fc_pre.data(), lc.ln2.data(), w + b.w_fc, w + b.b_fc, T, d, h);
    for (std::size_t i = 0; i < T * h; ++i) lc.fc_act[i] = k::gelu(lc.fc_pre[i]);
    k::matmul(tmp, lc.fc_act.data(), w + b.w_proj, w + b.b_proj, T, h, d);
    for (std::size_t i = 0; i < T * d; ++i) next[i] = lc.mid[i] + tmp[i];
  }
  k::layernorm(ws.lnf.data(), ws.meanf.data(), ws.rstdf.data(), ws.resid[c.n_layers].data(),
               w + L.lnf_g, w + L.lnf_b, T, d);
  k::matmul(ws.logits.data(), ws.lnf.data(), tw.head_weights(p), static_cast<const S*>(nullptr),
            T, d, V);
}

/// Accumulates dLoss/dParams into `grad` given dLoss/dLogits.
template <typename S>
void run_backward(const Params<S>& p, const Transposed<S>& tw, std::span<const TokenId> tokens,
                  Workspace<S>& ws, const std::vector<S>& dlogits, S* grad) {
  const auto& c = p.config();
  const auto& L = p.layout();
  const std::size_t T = tokens.size(), d = c.d_model, h = c.hidden(), H = c.n_heads;
  const std::size_t hd = c.head_dim(), V = c.vocab_size;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  const S* w = p.data();

  std::vector<S> dx(T * d), dln(T * d), dtmp(T * std::max(h, 3 * d)), dmid(T * d);

  k::matmul(dln.data(), dlogits.data(), tw.head_t.data(), static_cast<const S*>(nullptr), T, V,
            d);
  if (c.tied_embeddings) {
    k::matmul_weight_grad(grad + L.wte, static_cast<S*>(nullptr), dlogits.data(), ws.lnf.data(), T,
                          V, d);
  } else {
    k::matmul_weight_grad(grad + L.lm_head, static_cast<S*>(nullptr), ws.lnf.data(),
                          dlogits.data(), T, d, V);
  }
  k::layernorm_backward(dx.data(), grad + L.lnf_g, grad + L.lnf_b, dln.data(),
                        ws.resid[c.n_layers].data(), w + L.lnf_g, ws.meanf.data(),
                        ws.rstdf.data(), T, d);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& b = L.blocks[li];
    const auto& lc = ws.layers[li];
    // next = mid + gelu(ln2(mid) W_fc + b_fc) W_proj + b_proj
    dmid = dx;
    S* dh = dtmp.data();
    k::matmul(dh, dx.data(), tw.proj[li].data(), static_cast<const S*>(nullptr), T, d, h);
    k::matmul_weight_grad(grad + b.w_proj, grad + b.b_proj, lc.fc_act.data(), dx.data(), T, h, d);
    for (std::size_t i = 0; i < T * h; ++i) dh[i] *= k::gelu_grad(lc.fc_pre[i]);
    k::matmul(dln.data(), dh, tw.fc[li].data(), static_cast<const S*>(nullptr), T, h, d);
    k::matmul_weight_grad(grad + b.w_fc, grad + b.b_fc, lc.ln2.data(), dh, T, d, h);
    k::layernorm_backward(dmid.data(), grad + b.ln2_g, grad + b.ln2_b, dln.data(), lc.mid.data(),
                          w + b.ln2_g, lc.mean2.data(), lc.rstd2.data(), T, d);

    // mid = x + att W_out + b_out
    dx = dmid;
    std::vector<S>& datt = dln;
    k::matmul(datt.data(), dmid.data(), tw.out[li].data(), static_cast<const S*>(nullptr), T, d,
              d);
    k::matmul_weight_grad(grad + b.w_out, grad + b.b_out, lc.att.data(), dmid.data(), T, d, d);

    // Per head, with keys/values transposed so every inner loop runs over
    // key positions: dP = dA V^T, dS = P * (dP - rowsum(P * dP)) * scale,
    // dQ = dS K, dK^T += Q^T-weighted dS rows, dV^T += dA^T-weighted P rows.
    S* dqkv = dtmp.data();
    std::fill(dqkv, dqkv + T * 3 * d, S(0));
    const S* qkv = lc.qkv.data();
    std::vector<S> vt(hd * T), dkt(hd * T), dvt(hd * T), dp(T);
    for (std::size_t head = 0; head < H; ++head) {
      const S* kt = lc.kt.data() + head * hd * T;
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < hd; ++i) vt[i * T + t] = qkv[t * 3 * d + 2 * d + head * hd + i];
      }
      std::fill(dkt.begin(), dkt.end(), S(0));
      std::fill(dvt.begin(), dvt.end(), S(0));
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t len = t + 1;
        const S* probs = lc.probs.data() + (head * T + t) * T;
        const S* da = datt.data() + t * d + head * hd;
        const S* q = qkv + t * 3 * d + head * hd;
        S* dq = dqkv + t * 3 * d + head * hd;
        for (std::size_t j = 0; j < len; ++j) dp[j] = 0;
        for (std::size_t i = 0; i < hd; ++i) {
          const S a = da[i];
          const S* vrow = vt.data() + i * T;
          S* dvrow = dvt.data() + i * T;
          for (std::size_t j = 0; j < len; ++j) {
            dp[j] += a * vrow[j];
            dvrow[j] += a * probs[j];
          }
        }
        const S dot = k::dot_fixed(probs, dp.data(), len);
        for (std::size_t j = 0; j < len; ++j) dp[j] = probs[j] * (dp[j] - dot) * scale;
        for (std::size_t i = 0; i < hd; ++i) {
          dq[i] += k::dot_fixed(dp.data(), kt + i * T, len);
          const S qi = q[i];
          S* dkrow = dkt.data() + i * T;
          for (std::size_t j = 0; j < len; ++j) dkrow[j] += qi * dp[j];
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < hd; ++i) {
          dqkv[t * 3 * d + d + head * hd + i] += dkt[i * T + t];
          dqkv[t * 3 * d + 2 * d + head * hd + i] += dvt[i * T + t];
        }
      }
    }
    std::vector<S>& dln1 = dmid;
    k::matmul(dln1.data(), dqkv, tw.qkv[li].data(), static_cast<const S*>(nullptr), T, 3 * d, d);
    k::matmul_weight_grad(grad + b.w_qkv, grad + b.b_qkv, lc.ln1.data(), dqkv, T, d, 3 * d);
    k::layernorm_backward(dx.data(), grad + b.ln1_g, grad + b.ln1_b, dln1.data(),
                          ws.resid[li].data(), w + b.ln1_g, lc.mean1.data(), lc.rstd1.data(), T,
                          d);
  }

  for (std::size_t t = 0; t < T; ++t) {
    S* gte = grad + L.wte + tokens[t].value * d;
    S* gpe = grad + L.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      gte[i] += dx[t * d + i];
      gpe[i] += dx[t * d + i];
    }
  }
}

template <typename S>
double sequence_term(const Params<S>& p, const Transposed<S>& tw, const ScoredSequence& seq,
                     std::size_t index, const SequenceObjective& objective, Workspace<S>& ws,
                     S* grad) {
  if (seq.first_target == 0 || seq.first_target > seq.tokens.size()) {
    throw Error("scored sequence needs 1 <= first_target <= length");
  }
  run_forward(p, tw, seq.tokens, ws);
  const std::size_t V = p.config().vocab_size;
  const std::size_t n = seq.num_targets();
  std::vector<double> logp(n), dlogp(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = seq.first_target + i - 1;
    logp[i] = log_softmax_at<S>(std::span<const S>(ws.logits).subspan(pos * V, V),
                                seq.tokens[pos + 1].value);
  }
  const double loss = objective.evaluate(index, logp, dlogp);
  if (!grad) return loss;

  std::vector<S> dlogits(seq.tokens.size() * V, S(0));
  for (std::size_t i = 0; i < n; ++i) {
    if (dlogp[i] == 0.0) continue;
    const std::size_t pos = seq.first_target + i - 1;
    const S* row = ws.logits.data() + pos * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    double sum = 0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
    S* drow = dlogits.data() + pos * V;
    for (std::size_t v = 0; v < V; ++v) {
      const double prob = std::exp(static_cast<double>(row[v]) - mx) / sum;
      drow[v] = static_cast<S>(-dlogp[i] * prob);
    }
    drow[seq.tokens[pos + 1].value] += static_cast<S>(dlogp[i]);
  }
  run_backward(p, tw, seq.tokens, ws, dlogits, grad);
  return loss;
}

}  // namespace

template <typename S>
double log_softmax_at(std::span<const S> row, std::uint32_t token) {
  double mx = -std::numeric_limits<double>::infinity();
  for (auto v : row) mx = std::max(mx, static_cast<double>(v));
  double sum = 0;
  for (auto v : row) sum += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(row[token]) - mx - std::log(sum);
}

template <typename S>
std::vector<S> forward_logits(const Params<S>& params, std::span<const TokenId> tokens) {
  Transposed<S> tw(params, false);
  Workspace<S> ws;
  run_forward(params, tw, tokens, ws);
  return ws.logits;
}

template <typename S>
std::vector<double> log_prob(const Params<S>& params, std::span<const TokenId> context,
                             std::span<const TokenId> continuation) {
  if (context.empty()) throw Error("log_prob needs a non-empty context");
  TokenSeq all(context.begin(), context.end());
  all.insert(all.end(), continuation.begin(), continuation.end());
  auto logits = forward_logits(params, all);
  const std::size_t V = params.config().vocab_size;
  std::vector<double> out(continuation.size());
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::size_t pos = context.size() + i - 1;
    out[i] = log_softmax_at<S>(std::span<const S>(logits).subspan(pos * V, V),
                               continuation[i].value);
  }
  return out;
}

template <typename S>
double backward(const Params<S>& params, std::span<const ScoredSequence> batch,
                const SequenceObjective& objective, std::span<S> grad, unsigned threads) {
  if (grad.size() != params.size()) throw Error("gradient buffer has the wrong size");
  std::fill(grad.begin(), grad.end(), S(0));
  Transposed<S> tw(params, true);
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(batch.size())));
  std::vector<Workspace<S>> spaces(workers);
  std::vector<double> losses(batch.size());
  if (workers == 1) {
    std::vector<S> local(params.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::fill(local.begin(), local.end(), S(0));
      losses[i] = sequence_term(params, tw, batch[i], i, objective, spaces[0], local.data());
      for (std::size_t j = 0; j < local.size(); ++j) grad[j] += local[j];
    }
  } else {
    std::vector<std::vector<S>> per_seq(batch.size());
    parallel_for(batch.size(), workers, [&](std::size_t i, unsigned wk) {
      per_seq[i].assign(params.size(), S(0));
      losses[i] = sequence_term(params, tw, batch[i], i, objective, spaces[wk], per_seq[i].data());
    });
    for (const auto& local : per_seq) {
      for (std::size_t j = 0; j < local.size(); ++j) grad[j] += local[j];
    }
  }
  double total = 0;
  for (double l : losses) total += l;
  return total;
}

template <typename S>
double evaluate_objective(const Params<S>& params, std::span<const ScoredSequence> batch,
                          const SequenceObjective& objective, unsigned threads) {
  Transposed<S> tw(params, false);
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(batch.size())));
  std::vector<Workspace<S>> spaces(workers);
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), workers, [&](std::size_t i, unsigned wk) {
    losses[i] = sequence_term(params, tw, batch[i], i, objective, spaces[wk],
                              static_cast<S*>(nullptr));
  });
  double total = 0;
  for (double l : losses) total += l;
  return total;
}

template double log_softmax_at<float>(std::span<const float>, std::uint32_t);
template double log_softmax_at<double>(std::span<const double>, std::uint32_t);
template std::vector<float> forward_logits(const Params<float>&, std::span<const TokenId>);
template std::vector<double> forward_logits(const Params<double>&, std::span<const TokenId>);
template std::vector<double> log_prob(const Params<float>&, std::span<const TokenId>,
                                      std::span<const TokenId>);
template std::vector<double> log_prob(const Params<double>&, std::span<const TokenId>,
                                      std::span<const TokenId>);
template double backward(const Params<float>&, std::span<const ScoredSequence>,
                         const SequenceObjective&, std::span<float>, unsigned);
template double backward(const Params<double>&, std::span<const ScoredSequence>,
                         const SequenceObjective&, std::span<double>, unsigned);
template double evaluate_objective(const Params<float>&, std::span<const ScoredSequence>,
                                   const SequenceObjective&, unsigned);
template double evaluate_objective(const Params<double>&, std::span<const ScoredSequence>,
                                   const SequenceObjective&, unsigned);

// ---------------------------------------------------------------------------
// Incremental decoding

namespace {

struct KvCache {
  std::vector<std::vector<float>> k, v;  // per layer: k is d x context_len (transposed), v context_len x d
};

struct Member {
  KvCache cache;
  format::TraceAutomaton fsm;
  Rng rng;
  const SampleOptions* options;
  SampleResult result;
  bool done = false;
};

// `remaining` counts the tokens left in the budget, including this one. The
// mask keeps grammatical tokens after which a valid trace still fits; when
// none fits it keeps every grammatical token, and when none is grammatical
// it masks nothing.
std::uint32_t draw_token(std::span<const float> row, const Member& m, std::size_t remaining,
                         Rng& rng, std::vector<double>& recorded) {
  const auto& v = vocab();
  const std::size_t V = row.size();
  std::vector<bool> allowed(V, true);
  if (m.options->grammar_mask) {
    std::vector<bool> grammatical(V, false);
    bool any_fits = false, any_grammatical = false;
    for (std::size_t t = 0; t < V; ++t) {
      allowed[t] = false;
      if (t < v.size() && m.fsm.allows(TokenId{static_cast<std::uint32_t>(t)})) {
        grammatical[t] = any_grammatical = true;
        auto next = m.fsm;
        next.feed(TokenId{static_cast<std::uint32_t>(t)});
        allowed[t] = next.min_remaining() + 1 <= remaining;
      }
      any_fits = any_fits || allowed[t];
    }
    if (!any_fits) allowed = any_grammatical ? grammatical : std::vector<bool>(V, true);
  }
  if (m.options->temperature <= 0.0) {
    std::uint32_t best = 0;
    float best_val = -std::numeric_limits<float>::infinity();
    bool found = false;
    for (std::size_t t = 0; t < V; ++t) {
      if (!allowed[t]) continue;
      if (!found || row[t] > best_val) {
        best = static_cast<std::uint32_t>(t);
        best_val = row[t];
        found = true;
      }
    }
    return best;
  }
  const double inv_temp = 1.0 / m.options->temperature;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < V; ++t) {
    if (allowed[t]) mx = std::max(mx, static_cast<double>(row[t]) * inv_temp);
  }
  std::vector<double> w(V, 0.0);
  double sum = 0;
  for (std::size_t t = 0; t < V; ++t) {
    if (allowed[t]) {
      w[t] = std::exp(static_cast<double>(row[t]) * inv_temp - mx);
      sum += w[t];
    }
  }
  const double u = rng.uniform();
  if (m.options->record_uniforms) recorded.push_back(u);
  const double target = u * sum;
  double acc = 0;
  std::uint32_t last = 0;
  for (std::size_t t = 0; t < V; ++t) {
    if (w[t] == 0.0) continue;
    acc += w[t];
    last = static_cast<std::uint32_t>(t);
    if (target < acc) return last;
  }
  return last;
}

}  // namespace

std::vector<SampleResult> sample_batch(const Params<float>& params,
                                       std::span<const TokenId> context,
                                       std::span<const SampleOptions> options) {
  const auto& c = params.config();
  const auto& L = params.layout();
  check_context(c, context.size());
  const std::size_t d = c.d_model, h = c.hidden(), H = c.n_heads, hd = c.head_dim();
  const std::size_t V = c.vocab_size, ctx = c.context_len;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const float* w = params.data();

  Transposed<float> tw(params, false);
  Workspace<float> ws;
  run_forward(params, tw, context, ws);
  const std::size_t n0 = context.size();

  std::vector<Member> members;
  members.reserve(options.size());
  for (const auto& opt : options) {
    Member m{KvCache{}, format::TraceAutomaton(c.trace_style), Rng(opt.rng_seed), &opt, {}, false};
    m.cache.k.resize(c.n_layers);
    m.cache.v.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      auto& kc = m.cache.k[l];
      auto& vc = m.cache.v[l];
      kc.assign(ctx * d, 0.0f);
      vc.assign(ctx * d, 0.0f);
      const auto& qkv = ws.layers[l].qkv;
      for (std::size_t t = 0; t < n0; ++t) {
        for (std::size_t i = 0; i < d; ++i) kc[i * ctx + t] = qkv[t * 3 * d + d + i];
        std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(t * 3 * d + 2 * d), d, vc.begin() + static_cast<std::ptrdiff_t>(t * d));
      }
    }
    members.push_back(std::move(m));
  }

  const std::size_t room = ctx - n0;
  std::vector<float> logits(ws.logits.end() - static_cast<std::ptrdiff_t>(V), ws.logits.end());
  std::vector<std::size_t> active;
  std::vector<float> rows_logits;  // B x V, aligned with `active`
  for (std::size_t i = 0; i < members.size(); ++i) active.push_back(i);
  rows_logits.resize(active.size() * V);
  for (std::size_t b = 0; b < active.size(); ++b) {
    std::copy(logits.begin(), logits.end(), rows_logits.begin() + static_cast<std::ptrdiff_t>(b * V));
  }

  std::vector<float> x, ln, mean, rstd, qkv, att, tmp, mid, fc_pre, fc_act, probs(ctx);
  for (std::size_t step = 0;; ++step) {
    // Sample one token for every active member from its current logits.
    std::vector<std::size_t> still;
    std::vector<std::uint32_t> fed;
    for (std::size_t b = 0; b < active.size(); ++b) {
      auto& m = members[active[b]];
      const std::size_t cap = std::min(m.options->max_new_tokens, room);
      if (m.result.tokens.size() >= cap) continue;
      std::span<const float> row(rows_logits.data() + b * V, V);
      const auto tok = draw_token(row, m, cap - m.result.tokens.size(), m.rng, m.result.uniforms);
      m.result.tokens.emplace_back(tok);
      m.result.log_probs.push_back(log_softmax_at<float>(row, tok));
      if (tok < vocab().size()) m.fsm.feed(TokenId{tok});
      if (vocab().is(TokenId{tok}, Structural::kEos)) {
        m.result.finished = true;
        continue;
      }
      if (m.result.tokens.size() >= cap) continue;
      still.push_back(active[b]);
      fed.push_back(tok);
    }
    active = std::move(still);
    if (active.empty()) break;

    // Feed the sampled tokens through the network at position pos.
    const std::size_t B = active.size();
    const std::size_t pos = n0 + step;
    x.resize(B * d);
    ln.resize(B * d);
    mean.resize(B);
    rstd.resize(B);
    qkv.resize(B * 3 * d);
    att.resize(B * d);
    tmp.resize(B * d);
    mid.resize(B * d);
    fc_pre.resize(B * h);
    fc_act.resize(B * h);
    for (std::size_t b = 0; b < B; ++b) {
      const float* te = w + L.wte + fed[b] * d;
      const float* pe = w + L.wpe + pos * d;
      for (std::size_t i = 0; i < d; ++i) x[b * d + i] = te[i] + pe[i];
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& blk = L.blocks[l];
      k::layernorm(ln.data(), mean.data(), rstd.data(), x.data(), w + blk.ln1_g, w + blk.ln1_b,
                   B, d);
      k::matmul(qkv.data(), ln.data(), w + blk.w_qkv, w + blk.b_qkv, B, d, 3 * d);
      for (std::size_t b = 0; b < B; ++b) {
        auto& cache = members[active[b]].cache;
        for (std::size_t i = 0; i < d; ++i) cache.k[l][i * ctx + pos] = qkv[b * 3 * d + d + i];
        std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(b * 3 * d + 2 * d), d,
                    cache.v[l].begin() + static_cast<std::ptrdiff_t>(pos * d));
      }
      for (std::size_t head = 0; head < H; ++head) {
        for (std::size_t b = 0; b < B; ++b) {
          auto& cache = members[active[b]].cache;
          k::attend_row(att.data() + b * d + head * hd, probs.data(),
                        qkv.data() + b * 3 * d + head * hd, cache.k[l].data() + head * hd * ctx, ctx,
                        cache.v[l].data() + head * hd, d, pos + 1, hd, scale);
        }
      }
      k::matmul(tmp.data(), att.data(), w + blk.w_out, w + blk.b_out, B, d, d);
      for (std::size_t i = 0; i < B * d; ++i) mid[i] = x[i] + tmp[i];
      k::layernorm(ln.data(), mean.data(), rstd.data(), mid.data(), w + blk.ln2_g, w + blk.ln2_b,
                   B, d);
      k::matmul(fc_pre.data(), ln.data(), w + blk.w_fc, w + blk.b_fc, B, d, h);
      for (std::size_t i = 0; i < B * h; ++i) fc_act[i] = k::gelu(fc_pre[i]);
      k::matmul(tmp.data(), fc_act.data(), w + blk.w_proj, w + blk.b_proj, B, h, d);
      for (std::size_t i = 0; i < B * d; ++i) x[i] = mid[i] + tmp[i];
    }
    k::layernorm(ln.data(), mean.data(), rstd.data(), x.data(), w + L.lnf_g, w + L.lnf_b, B, d);
    rows_logits.resize(B * V);
    k::matmul(rows_logits.data(), ln.data(), tw.head_weights(params),
              static_cast<const float*>(nullptr), B, d, V);
  }

  std::vector<SampleResult> out;
  out.reserve(members.size());
  for (auto& m : members) out.push_back(std::move(m.result));
  return out;
}

SampleResult sample(const Params<float>& params, std::span<const TokenId> context,
                    const SampleOptions& options) {
  return std::move(sample_batch(params, context, std::span<const SampleOptions>(&options, 1))[0]);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[4] = {'X', 'C', 'F', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const Params<float>& params) {
  const auto& c = params.config();
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(kVersion);
  // config block: byte length, then fields
  constexpr std::uint32_t kConfigBytes = 9 * 4;
  w.put(kConfigBytes);
  w.put(c.vocab_size);
  w.put(c.d_model);
  w.put(c.n_layers);
  w.put(c.n_heads);
  w.put(c.mlp_ratio);
  w.put(c.context_len);
  w.put(c.init_scale);
  w.put(static_cast<std::uint32_t>(c.tied_embeddings));
  w.put(static_cast<std::uint32_t>(c.trace_style));
  const auto& tensors = params.layout().tensors;
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put(static_cast<std::uint32_t>(t.dims.size()));
    for (auto dim : t.dims) w.put(static_cast<std::uint32_t>(dim));
    w.put_bytes(params.data() + t.offset, t.size * sizeof(float));
  }
  Fnv1a h;
  h.update(w.bytes);
  w.put(h.digest());
  return std::move(w.bytes);
}

Params<float> checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw IoError("checkpoint too short");
  Fnv1a h;
  h.update(bytes.first(bytes.size() - 8));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != h.digest()) throw HashMismatch("checkpoint checksum mismatch");

  Reader r(bytes.first(bytes.size() - 8));
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("not an XCF1 checkpoint");
  if (auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(v));
  }
  const auto block = r.get<std::uint32_t>();
  const auto block_start = r.position();
  PolicyConfig c;
  c.vocab_size = r.get<std::uint32_t>();
  c.d_model = r.get<std::uint32_t>();
  c.n_layers = r.get<std::uint32_t>();
  c.n_heads = r.get<std::uint32_t>();
  c.mlp_ratio = r.get<std::uint32_t>();
  c.context_len = r.get<std::uint32_t>();
  c.init_scale = r.get<float>();
  c.tied_embeddings = r.get<std::uint32_t>() != 0;
  const auto style = r.get<std::uint32_t>();
  if (style > 1) throw IoError("unknown trace style in checkpoint");
  c.trace_style = static_cast<format::TraceStyle>(style);
  if (r.position() - block_start != block) throw IoError("checkpoint config block size mismatch");
  Params<float> params(c);
  const auto& tensors = params.layout().tensors;
  if (r.get<std::uint32_t>() != tensors.size()) throw IoError("checkpoint tensor count mismatch");
  for (const auto& t : tensors) {
    std::string name(r.get<std::uint32_t>(), '\0');
    r.get_bytes(name.data(), name.size());
    if (name != t.name) throw IoError("checkpoint tensor '" + name + "' where '" + t.name + "' expected");
    if (r.get<std::uint32_t>() != t.dims.size()) throw IoError("tensor rank mismatch: " + name);
    for (auto dim : t.dims) {
      if (r.get<std::uint32_t>() != dim) throw IoError("tensor shape mismatch: " + name);
    }
    r.get_bytes(params.data() + t.offset, t.size * sizeof(float));
  }
  return params;
}

void save_checkpoint(const Params<float>& params, const std::filesystem::path& path) {
  auto bytes = checkpoint_bytes(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Params<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return checkpoint_from_bytes(bytes);
  } catch (const Error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace xcot::policy
