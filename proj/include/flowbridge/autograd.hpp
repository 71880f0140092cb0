#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flowbridge/errors.hpp"
#include "flowbridge/params.hpp"
#include "flowbridge/tensor.hpp"

namespace flowbridge {

template <typename T>
class Tape;

// Handle into a tape node. Cheap to copy; valid for the tape's lifetime.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Tensor<T>& value() const;
    const std::vector<int>& shape() const { return value().shape; }
};

// Dynamic reverse-mode tape. Nodes are appended in forward order, so the
// vector index order is already a topological order for backward.
template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily on first accumulation
        bool requires_grad = false;
        std::function<void(Tape&, int)> backward;
        Tensor<T> aux;  // op scratch kept for backward (e.g. attention probs)
    };

    explicit Tape(bool inference = false) : inference_(inference) {}

    bool inference_mode() const { return inference_; }

    Var<T> emplace(Tensor<T> value, bool requires_grad,
                   std::function<void(Tape&, int)> backward = nullptr) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && !inference_;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

    // Accumulation target for a parent's gradient; allocates zeros on demand.
    Tensor<T>& grad_ref(int id) {
        Node& n = node(id);
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
        return n.grad;
    }

    bool wants_grad(int id) const { return node(id).requires_grad; }

    // Binds a store entry as a leaf, deduplicated per (store, name) so one
    // parameter is one node regardless of how often it is used.
    Var<T> param(ParameterStore<T>& store, const std::string& name, const std::string& qualified) {
        auto key = std::make_pair(static_cast<const void*>(&store), name);
        auto it = param_ids_.find(key);
        if (it != param_ids_.end()) return Var<T>{this, it->second};
        auto& e = store.entry(name);
        Var<T> v = emplace(e.tensor, !e.frozen);
        param_ids_[key] = v.id;
        if (!e.frozen && !inference_) bindings_.push_back({qualified, v.id});
        return v;
    }

    // Runs backward from a scalar loss and returns d(loss)/d(param) for every
    // non-frozen bound parameter reachable from the loss.
    GradMap<T> compute_gradients(Var<T> loss) {
        backward(loss);
        GradMap<T> out;
        for (const auto& [name, id] : bindings_) {
            const Node& n = node(id);
            if (!n.grad.data.empty()) out.emplace(name, n.grad);
        }
        return out;
    }

    void backward(Var<T> loss) {
        if (loss.tape != this) throw ContractViolation("loss belongs to a different tape");
        Node& ln = node(loss.id);
        if (ln.value.size() != 1) throw ContractViolation("backward requires a scalar loss");
        grad_ref(loss.id).data[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = node(i);
            if (!n.requires_grad || n.grad.data.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
    }

private:
    struct PairHash {
        size_t operator()(const std::pair<const void*, std::string>& p) const {
            return std::hash<const void*>()(p.first) ^ (std::hash<std::string>()(p.second) << 1);
        }
    };

    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, int>> bindings_;
    std::unordered_map<std::pair<const void*, std::string>, int, PairHash> param_ids_;
    bool inference_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->node(id).value;
}

// ---------------------------------------------------------------------------
// graph-building free functions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> constant(Tape<T>& tape, Tensor<T> value) {
    return tape.emplace(std::move(value), false);
}

template <typename T>
Var<T> input(Tape<T>& tape, Tensor<T> value, bool requires_grad = false) {
    return tape.emplace(std::move(value), requires_grad);
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    if (a.value().shape != b.value().shape)
        throw DimensionError("add: shape mismatch " + shape_str(a.value().shape) + " vs " +
                             shape_str(b.value().shape));
    Tensor<T> out = a.value() + b.value();
    bool rg = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    return tp.emplace(std::move(out), rg, [ai = a.id, bi = b.id](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        for (int pid : {ai, bi}) {
            if (!t.wants_grad(pid)) continue;
            Tensor<T>& pg = t.grad_ref(pid);
            for (int64_t i = 0; i < g.size(); ++i) pg.at(i) += g.at(i);
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    if (a.value().shape != b.value().shape)
        throw DimensionError("sub: shape mismatch " + shape_str(a.value().shape) + " vs " +
                             shape_str(b.value().shape));
    Tensor<T> out = a.value() - b.value();
    bool rg = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    return tp.emplace(std::move(out), rg, [ai = a.id, bi = b.id](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(ai)) {
            Tensor<T>& pg = t.grad_ref(ai);
            for (int64_t i = 0; i < g.size(); ++i) pg.at(i) += g.at(i);
        }
        if (t.wants_grad(bi)) {
            Tensor<T>& pg = t.grad_ref(bi);
            for (int64_t i = 0; i < g.size(); ++i) pg.at(i) -= g.at(i);
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value() * s;
    return tp.emplace(std::move(out), tp.wants_grad(a.id), [ai = a.id, s](Tape<T>& t, int self) {
        if (!t.wants_grad(ai)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_ref(ai);
        for (int64_t i = 0; i < g.size(); ++i) pg.at(i) += g.at(i) * s;
    });
}

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int> shape) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value().reshaped(shape);
    return tp.emplace(std::move(out), tp.wants_grad(a.id), [ai = a.id](Tape<T>& t, int self) {
        if (!t.wants_grad(ai)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_ref(ai);
        for (int64_t i = 0; i < g.size(); ++i) pg.at(i) += g.at(i);
    });
}

// out[r, :] = x[r, :] * W + b over all leading dims collapsed to rows.
template <typename T>
Var<T> linear(Var<T> x, Var<T> W, Var<T> b) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = W.value();
    const Tensor<T>& bv = b.value();
    if (wv.ndim() != 2 || xv.cols() != wv.dim(0) || bv.size() != wv.dim(1))
        throw DimensionError("linear: x " + shape_str(xv.shape) + " incompatible with W " +
                             shape_str(wv.shape) + ", b " + shape_str(bv.shape));
    const int64_t R = xv.rows();
    const int din = wv.dim(0), dout = wv.dim(1);
    std::vector<int> out_shape = xv.shape;
    out_shape.back() = dout;
    Tensor<T> out(out_shape);
    out.mat(R, dout).noalias() = xv.mat(R, din) * wv.mat2d();
    out.mat(R, dout).rowwise() += bv.mat(1, dout).row(0);
    bool rg = tp.wants_grad(x.id) || tp.wants_grad(W.id) || tp.wants_grad(b.id);
    return tp.emplace(std::move(out), rg,
                      [xi = x.id, wi = W.id, bi = b.id, R, din, dout](Tape<T>& t, int self) {
                          auto gy = t.node(self).grad.mat(R, dout);
                          if (t.wants_grad(xi))
                              t.grad_ref(xi).mat(R, din).noalias() +=
                                  gy * t.node(wi).value.mat2d().transpose();
                          if (t.wants_grad(wi))
                              t.grad_ref(wi).mat2d().noalias() +=
                                  t.node(xi).value.mat(R, din).transpose() * gy;
                          if (t.wants_grad(bi)) {
                              // fixed-order accumulation: bit-reproducible
                              // regardless of heap alignment
                              Tensor<T>& gb = t.grad_ref(bi);
                              for (int64_t r = 0; r < R; ++r)
                                  for (int j = 0; j < dout; ++j) gb.at(j) += gy(r, j);
                          }
                      });
}

// Per-row zero mean / unit (population) variance, then affine.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    const int d = xv.cols();
    if (d == 0) throw DimensionError("layer_norm: last dimension is zero");
    if (gain.value().size() != d || bias.value().size() != d)
        throw DimensionError("layer_norm: gain/bias length must equal last dim " + std::to_string(d));
    if (!(eps > 0)) throw ContractViolation("layer_norm: eps must be positive");
    const int64_t R = xv.rows();
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);  // saved for backward
    Tensor<T> inv_sigma({static_cast<int>(R)});
    auto xm = xv.mat(R, d);
    auto om = out.mat(R, d);
    auto hm = xhat.mat(R, d);
    auto gv = gain.value().mat(1, d).row(0);
    auto bv = bias.value().mat(1, d).row(0);
    for (int64_t r = 0; r < R; ++r) {
        // scalar reductions in fixed order for bit-reproducibility
        T mu = T(0), var = T(0);
        for (int j = 0; j < d; ++j) mu += xm(r, j);
        mu /= static_cast<T>(d);
        for (int j = 0; j < d; ++j) {
            T c = xm(r, j) - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T inv = T(1) / std::sqrt(var + eps);
        inv_sigma.at(r) = inv;
        hm.row(r) = (xm.row(r).array() - mu) * inv;
        om.row(r) = hm.row(r).cwiseProduct(gv) + bv;
    }
    bool rg = tp.wants_grad(x.id) || tp.wants_grad(gain.id) || tp.wants_grad(bias.id);
    Var<T> y = tp.emplace(std::move(out), rg,
                          [xi = x.id, gi = gain.id, bi = bias.id, xhat, inv_sigma, R,
                           d](Tape<T>& t, int self) {
                              auto gy = t.node(self).grad.mat(R, d);
                              auto hm2 = xhat.mat(R, d);
                              auto gv2 = t.node(gi).value.mat(1, d).row(0);
                              if (t.wants_grad(gi)) {
                                  auto gg = t.grad_ref(gi).mat(1, d);
                                  for (int64_t r = 0; r < R; ++r)
                                      gg.row(0) += gy.row(r).cwiseProduct(hm2.row(r));
                              }
                              if (t.wants_grad(bi)) {
                                  Tensor<T>& gb = t.grad_ref(bi);
                                  for (int64_t r = 0; r < R; ++r)
                                      for (int j = 0; j < d; ++j) gb.at(j) += gy(r, j);
                              }
                              if (t.wants_grad(xi)) {
                                  auto gx = t.grad_ref(xi).mat(R, d);
                                  for (int64_t r = 0; r < R; ++r) {
                                      Eigen::Matrix<T, 1, Eigen::Dynamic> dh =
                                          gy.row(r).cwiseProduct(gv2);
                                      T m1 = T(0), m2 = T(0);
                                      for (int j = 0; j < d; ++j) {
                                          m1 += dh(j);
                                          m2 += dh(j) * hm2(r, j);
                                      }
                                      m1 /= static_cast<T>(d);
                                      m2 /= static_cast<T>(d);
                                      gx.row(r) +=
                                          ((dh.array() - m1) - hm2.row(r).array() * m2).matrix() *
                                          inv_sigma.at(r);
                                  }
                              }
                          });
    return y;
}

// GELU, tanh approximation.
template <typename T>
Var<T> gelu(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape);
    const T c = static_cast<T>(std::sqrt(2.0 / M_PI));
    const T a = static_cast<T>(0.044715);
    for (int64_t i = 0; i < xv.size(); ++i) {
        T v = xv.at(i);
        out.at(i) = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
    }
    return tp.emplace(std::move(out), tp.wants_grad(x.id), [xi = x.id, c, a](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& xv2 = t.node(xi).value;
        Tensor<T>& pg = t.grad_ref(xi);
        for (int64_t i = 0; i < g.size(); ++i) {
            T v = xv2.at(i);
            T u = c * (v + a * v * v * v);
            T th = std::tanh(u);
            T sech2 = T(1) - th * th;
            T d = T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * c * (T(1) + T(3) * a * v * v);
            pg.at(i) += g.at(i) * d;
        }
    });
}

enum class AttnMask {
    none,          // full bidirectional attention
    causal,        // Lq == Lk, query i sees keys j <= i
    causal_offset  // query i sees keys j <= offset + i (keys carry a prefix)
};

namespace detail {

template <typename T>
using StridedMap = Eigen::Map<const MatX<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedMutMap = Eigen::Map<MatX<T>, 0, Eigen::OuterStride<>>;

template <typename T>
StridedMap<T> head_view(const Tensor<T>& t, int b, int L, int D, int h, int dh) {
    return StridedMap<T>(t.data.data() + static_cast<int64_t>(b) * L * D + h * dh, L, dh,
                         Eigen::OuterStride<>(D));
}
template <typename T>
StridedMutMap<T> head_view_mut(Tensor<T>& t, int b, int L, int D, int h, int dh) {
    return StridedMutMap<T>(t.data.data() + static_cast<int64_t>(b) * L * D + h * dh, L, dh,
                            Eigen::OuterStride<>(D));
}

}  // namespace detail

// Scaled dot-product multi-head attention core on projected q/k/v of shape
// [B, L, D]. Per-head scale 1/sqrt(D/heads); attention rows sum to 1.
// probs_out, when given, receives the [B, H, Lq, Lk] attention weights.
template <typename T>
Var<T> sdpa(Var<T> q, Var<T> k, Var<T> v, int heads, AttnMask mask, int offset = 0,
            Tensor<T>* probs_out = nullptr) {
    Tape<T>& tp = *q.tape;
    const Tensor<T>& qv = q.value();
    const Tensor<T>& kv = k.value();
    const Tensor<T>& vv = v.value();
    if (qv.ndim() != 3 || kv.ndim() != 3 || vv.ndim() != 3)
        throw DimensionError("sdpa expects [B,L,D] inputs");
    const int B = qv.dim(0), Lq = qv.dim(1), D = qv.dim(2);
    const int Lk = kv.dim(1);
    if (kv.dim(0) != B || vv.dim(0) != B || vv.dim(1) != Lk || kv.dim(2) != D || vv.dim(2) != D)
        throw DimensionError("sdpa: q " + shape_str(qv.shape) + " vs k " + shape_str(kv.shape) +
                             " vs v " + shape_str(vv.shape));
    if (D % heads != 0) throw DimensionError("sdpa: D not divisible by heads");
    if (mask == AttnMask::causal && Lq != Lk)
        throw ContractViolation("causal attention requires Lq == Lk");
    const int dh = D / heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    const int key_limit_base = (mask == AttnMask::none) ? Lk : (mask == AttnMask::causal ? 1 : offset + 1);

    Tensor<T> out({B, Lq, D});
    Tensor<T> probs({B, heads, Lq, Lk});
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
            auto Qh = detail::head_view(qv, b, Lq, D, h, dh);
            auto Kh = detail::head_view(kv, b, Lk, D, h, dh);
            auto Vh = detail::head_view(vv, b, Lk, D, h, dh);
            MatX<T> S = (Qh * Kh.transpose()) * sc;  // [Lq, Lk]
            T* P = probs.data.data() +
                   ((static_cast<int64_t>(b) * heads + h) * Lq) * Lk;
            for (int i = 0; i < Lq; ++i) {
                int limit = (mask == AttnMask::none) ? Lk : std::min(Lk, key_limit_base + i);
                T mx = S(i, 0);
                for (int j = 1; j < limit; ++j) mx = std::max(mx, S(i, j));
                T sum = T(0);
                for (int j = 0; j < limit; ++j) {
                    T e = std::exp(S(i, j) - mx);
                    P[static_cast<int64_t>(i) * Lk + j] = e;
                    sum += e;
                }
                for (int j = limit; j < Lk; ++j) P[static_cast<int64_t>(i) * Lk + j] = T(0);
                T inv = T(1) / sum;
                for (int j = 0; j < limit; ++j) P[static_cast<int64_t>(i) * Lk + j] *= inv;
            }
            ConstMatMap<T> Pm(P, Lq, Lk);
            auto Oh = detail::head_view_mut(out, b, Lq, D, h, dh);
            Oh.noalias() = Pm * Vh;
        }
    }
    if (probs_out) *probs_out = probs;
    bool rg = tp.wants_grad(q.id) || tp.wants_grad(k.id) || tp.wants_grad(v.id);
    Var<T> o = tp.emplace(std::move(out), rg,
                          [qi = q.id, ki = k.id, vi = v.id, B, Lq, Lk, D, heads, dh,
                           sc](Tape<T>& t, int self) {
                              const Tensor<T>& go = t.node(self).grad;
                              const Tensor<T>& probs2 = t.node(self).aux;
                              const Tensor<T>& qv2 = t.node(qi).value;
                              const Tensor<T>& kv2 = t.node(ki).value;
                              const Tensor<T>& vv2 = t.node(vi).value;
                              bool wq = t.wants_grad(qi), wk = t.wants_grad(ki), wv2g = t.wants_grad(vi);
                              Tensor<T>* gq = wq ? &t.grad_ref(qi) : nullptr;
                              Tensor<T>* gk = wk ? &t.grad_ref(ki) : nullptr;
                              Tensor<T>* gv = wv2g ? &t.grad_ref(vi) : nullptr;
                              for (int b = 0; b < B; ++b) {
                                  for (int h = 0; h < heads; ++h) {
                                      const T* P = probs2.data.data() +
                                                   ((static_cast<int64_t>(b) * heads + h) * Lq) * Lk;
                                      ConstMatMap<T> Pm(P, Lq, Lk);
                                      auto dOh = detail::head_view(go, b, Lq, D, h, dh);
                                      auto Vh = detail::head_view(vv2, b, Lk, D, h, dh);
                                      if (wv2g) {
                                          auto gVh = detail::head_view_mut(*gv, b, Lk, D, h, dh);
                                          gVh.noalias() += Pm.transpose() * dOh;
                                      }
                                      if (!wq && !wk) continue;
                                      MatX<T> dP = dOh * Vh.transpose();  // [Lq, Lk]
                                      MatX<T> dS(Lq, Lk);
                                      for (int i = 0; i < Lq; ++i) {
                                          T dot = T(0);
                                          for (int j = 0; j < Lk; ++j) dot += Pm(i, j) * dP(i, j);
                                          dS.row(i) = Pm.row(i).cwiseProduct(
                                              (dP.row(i).array() - dot).matrix());
                                      }
                                      auto Qh = detail::head_view(qv2, b, Lq, D, h, dh);
                                      auto Kh = detail::head_view(kv2, b, Lk, D, h, dh);
                                      if (wq) {
                                          auto gQh = detail::head_view_mut(*gq, b, Lq, D, h, dh);
                                          gQh.noalias() += dS * Kh * sc;
                                      }
                                      if (wk) {
                                          auto gKh = detail::head_view_mut(*gk, b, Lk, D, h, dh);
                                          gKh.noalias() += dS.transpose() * Qh * sc;
                                      }
                                  }
                              }
                          });
    tp.node(o.id).aux = probs;
    return o;
}

// Concatenation along axis 1 of [B, L, D] tensors.
template <typename T>
Var<T> concat_seq(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
        throw DimensionError("concat_seq: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    const int B = av.dim(0), La = av.dim(1), Lb = bv.dim(1), D = av.dim(2);
    Tensor<T> out({B, La + Lb, D});
    for (int b2 = 0; b2 < B; ++b2) {
        std::copy(av.data.begin() + static_cast<int64_t>(b2) * La * D,
                  av.data.begin() + static_cast<int64_t>(b2 + 1) * La * D,
                  out.data.begin() + static_cast<int64_t>(b2) * (La + Lb) * D);
        std::copy(bv.data.begin() + static_cast<int64_t>(b2) * Lb * D,
                  bv.data.begin() + static_cast<int64_t>(b2 + 1) * Lb * D,
                  out.data.begin() + static_cast<int64_t>(b2) * (La + Lb) * D + static_cast<int64_t>(La) * D);
    }
    bool rg = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    return tp.emplace(std::move(out), rg, [ai = a.id, bi = b.id, B, La, Lb, D](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        for (int b2 = 0; b2 < B; ++b2) {
            const T* src = g.data.data() + static_cast<int64_t>(b2) * (La + Lb) * D;
            if (t.wants_grad(ai)) {
                T* dst = t.grad_ref(ai).data.data() + static_cast<int64_t>(b2) * La * D;
                for (int64_t i = 0; i < static_cast<int64_t>(La) * D; ++i) dst[i] += src[i];
            }
            if (t.wants_grad(bi)) {
                T* dst = t.grad_ref(bi).data.data() + static_cast<int64_t>(b2) * Lb * D;
                for (int64_t i = 0; i < static_cast<int64_t>(Lb) * D; ++i) dst[i] += src[static_cast<int64_t>(La) * D + i];
            }
        }
    });
}

// Slice [B, L, D] along axis 1.
template <typename T>
Var<T> slice_seq(Var<T> x, int start, int len) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    if (xv.ndim() != 3 || start < 0 || start + len > xv.dim(1))
        throw DimensionError("slice_seq: invalid range on " + shape_str(xv.shape));
    const int B = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
    Tensor<T> out({B, len, D});
    for (int b = 0; b < B; ++b)
        std::copy(xv.data.begin() + (static_cast<int64_t>(b) * L + start) * D,
                  xv.data.begin() + (static_cast<int64_t>(b) * L + start + len) * D,
                  out.data.begin() + static_cast<int64_t>(b) * len * D);
    return tp.emplace(std::move(out), tp.wants_grad(x.id),
                      [xi = x.id, B, L, D, start, len](Tape<T>& t, int self) {
                          if (!t.wants_grad(xi)) return;
                          const Tensor<T>& g = t.node(self).grad;
                          Tensor<T>& pg = t.grad_ref(xi);
                          for (int b = 0; b < B; ++b) {
                              const T* src = g.data.data() + static_cast<int64_t>(b) * len * D;
                              T* dst = pg.data.data() + (static_cast<int64_t>(b) * L + start) * D;
                              for (int64_t i = 0; i < static_cast<int64_t>(len) * D; ++i) dst[i] += src[i];
                          }
                      });
}

// Gathers rows of a [V, D] table: out[i, :] = table[ids[i], :].
// Output shape is out_shape (ids.size() rows collapsed into it).
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids, std::vector<int> out_shape) {
    Tape<T>& tp = *table.tape;
    const Tensor<T>& tv = table.value();
    if (tv.ndim() != 2) throw DimensionError("embedding table must be 2-D");
    const int V = tv.dim(0), D = tv.dim(1);
    Tensor<T> out(std::move(out_shape));
    if (out.size() != static_cast<int64_t>(ids.size()) * D)
        throw DimensionError("embedding: output shape does not match id count");
    for (size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= V) throw ContractViolation("embedding id out of range");
        std::copy(tv.data.begin() + static_cast<int64_t>(id) * D,
                  tv.data.begin() + static_cast<int64_t>(id + 1) * D,
                  out.data.begin() + static_cast<int64_t>(i) * D);
    }
    return tp.emplace(std::move(out), tp.wants_grad(table.id),
                      [ti = table.id, ids, D](Tape<T>& t, int self) {
                          if (!t.wants_grad(ti)) return;
                          const Tensor<T>& g = t.node(self).grad;
                          Tensor<T>& pg = t.grad_ref(ti);
                          for (size_t i = 0; i < ids.size(); ++i) {
                              const T* src = g.data.data() + static_cast<int64_t>(i) * D;
                              T* dst = pg.data.data() + static_cast<int64_t>(ids[i]) * D;
                              for (int j = 0; j < D; ++j) dst[j] += src[j];
                          }
                      });
}

// x [B, L, D] + p [L, D] broadcast over the batch.
template <typename T>
Var<T> add_pos(Var<T> x, Var<T> p) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& pv = p.value();
    if (xv.ndim() != 3 || pv.ndim() != 2 || xv.dim(1) != pv.dim(0) || xv.dim(2) != pv.dim(1))
        throw DimensionError("add_pos: " + shape_str(xv.shape) + " vs " + shape_str(pv.shape));
    const int B = xv.dim(0);
    const int64_t LD = static_cast<int64_t>(xv.dim(1)) * xv.dim(2);
    Tensor<T> out = xv;
    for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < LD; ++i) out.data[static_cast<size_t>(b * LD + i)] += pv.data[static_cast<size_t>(i)];
    bool rg = tp.wants_grad(x.id) || tp.wants_grad(p.id);
    return tp.emplace(std::move(out), rg, [xi = x.id, pi = p.id, B, LD](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_ref(xi);
            for (int64_t i = 0; i < g.size(); ++i) pg.at(i) += g.at(i);
        }
        if (t.wants_grad(pi)) {
            Tensor<T>& pg = t.grad_ref(pi);
            for (int b = 0; b < B; ++b)
                for (int64_t i = 0; i < LD; ++i) pg.at(i) += g.at(b * LD + i);
        }
    });
}

// x [B, L, D] + y [B, D]: y[b] added to every sequence position of sample b.
// out[b,l,d] = x[b,l,d] * y[b,d] — per-sample broadcast over the token axis.
template <typename T>
Var<T> mul_per_sample(Var<T> x, Var<T> y) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& yv = y.value();
    if (xv.ndim() != 3 || yv.ndim() != 2 || xv.dim(0) != yv.dim(0) || xv.dim(2) != yv.dim(1))
        throw DimensionError("mul_per_sample: " + shape_str(xv.shape) + " vs " + shape_str(yv.shape));
    const int B = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
    Tensor<T> out = xv;
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d)
                out.data[static_cast<size_t>((static_cast<int64_t>(b) * L + l) * D + d)] *=
                    yv.data[static_cast<size_t>(static_cast<int64_t>(b) * D + d)];
    bool rg = tp.wants_grad(x.id) || tp.wants_grad(y.id);
    Tensor<T> xc = xv, yc = yv;
    return tp.emplace(std::move(out), rg,
                      [xi = x.id, yi = y.id, B, L, D, xc = std::move(xc),
                       yc = std::move(yc)](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_ref(xi);
            for (int b = 0; b < B; ++b)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d) {
                        int64_t i = (static_cast<int64_t>(b) * L + l) * D + d;
                        pg.at(i) += g.at(i) * yc.at(static_cast<int64_t>(b) * D + d);
                    }
        }
        if (t.wants_grad(yi)) {
            Tensor<T>& pg = t.grad_ref(yi);
            for (int b = 0; b < B; ++b)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d)
                        pg.at(static_cast<int64_t>(b) * D + d) +=
                            g.at((static_cast<int64_t>(b) * L + l) * D + d) *
                            xc.at((static_cast<int64_t>(b) * L + l) * D + d);
        }
    });
}

template <typename T>
Var<T> add_per_sample(Var<T> x, Var<T> y) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& yv = y.value();
    if (xv.ndim() != 3 || yv.ndim() != 2 || xv.dim(0) != yv.dim(0) || xv.dim(2) != yv.dim(1))
        throw DimensionError("add_per_sample: " + shape_str(xv.shape) + " vs " + shape_str(yv.shape));
    const int B = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
    Tensor<T> out = xv;
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d)
                out.data[static_cast<size_t>((static_cast<int64_t>(b) * L + l) * D + d)] +=
                    yv.data[static_cast<size_t>(static_cast<int64_t>(b) * D + d)];
    bool rg = tp.wants_grad(x.id) || tp.wants_grad(y.id);
    return tp.emplace(std::move(out), rg, [xi = x.id, yi = y.id, B, L, D](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_ref(xi);
            for (int64_t i = 0; i < g.size(); ++i) pg.at(i) += g.at(i);
        }
        if (t.wants_grad(yi)) {
            Tensor<T>& pg = t.grad_ref(yi);
            for (int b = 0; b < B; ++b)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d)
                        pg.at(static_cast<int64_t>(b) * D + d) +=
                            g.at((static_cast<int64_t>(b) * L + l) * D + d);
        }
    });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& tp = *x.tape;
    T s = T(0);
    for (T v : x.value().data) s += v;
    Tensor<T> out({1});
    out.at(0) = s;
    return tp.emplace(std::move(out), tp.wants_grad(x.id), [xi = x.id](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        T g = t.node(self).grad.at(0);
        Tensor<T>& pg = t.grad_ref(xi);
        for (auto& v : pg.data) v += g;
    });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    return scale(sum_all(x), static_cast<T>(1.0 / static_cast<double>(x.value().size())));
}

// Mean squared error against a constant target, over all elements.
template <typename T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target) {
    Tape<T>& tp = *pred.tape;
    const Tensor<T>& pv = pred.value();
    if (pv.shape != target.shape)
        throw DimensionError("mse_loss: shape mismatch " + shape_str(pv.shape) + " vs " +
                             shape_str(target.shape));
    double s = 0.0;
    for (int64_t i = 0; i < pv.size(); ++i) {
        double d = static_cast<double>(pv.at(i)) - static_cast<double>(target.at(i));
        s += d * d;
    }
    Tensor<T> out({1});
    out.at(0) = static_cast<T>(s / static_cast<double>(pv.size()));
    return tp.emplace(std::move(out), tp.wants_grad(pred.id),
                      [pi = pred.id, target](Tape<T>& t, int self) {
                          if (!t.wants_grad(pi)) return;
                          T g = t.node(self).grad.at(0);
                          const Tensor<T>& pv2 = t.node(pi).value;
                          Tensor<T>& pg = t.grad_ref(pi);
                          T c = g * static_cast<T>(2.0 / static_cast<double>(pv2.size()));
                          for (int64_t i = 0; i < pv2.size(); ++i)
                              pg.at(i) += c * (pv2.at(i) - target.at(i));
                      });
}

// Mean next-token cross-entropy. logits rows = targets.size(); target -1 rows
// are ignored. Returns (loss, number of scored rows).
template <typename T>
std::pair<Var<T>, int> cross_entropy(Var<T> logits, const std::vector<int>& targets) {
    Tape<T>& tp = *logits.tape;
    const Tensor<T>& lv = logits.value();
    const int V = lv.cols();
    const int64_t R = lv.rows();
    if (R != static_cast<int64_t>(targets.size()))
        throw DimensionError("cross_entropy: row count does not match target count");
    Tensor<T> probs(lv.shape);
    auto lm = lv.mat(R, V);
    auto pm = probs.mat(R, V);
    double total = 0.0;
    int n = 0;
    for (int64_t r = 0; r < R; ++r) {
        T mx = lm(r, 0);
        for (int j = 1; j < V; ++j) mx = std::max(mx, lm(r, j));
        T sum = T(0);
        for (int j = 0; j < V; ++j) {
            pm(r, j) = std::exp(lm(r, j) - mx);
            sum += pm(r, j);
        }
        pm.row(r) /= sum;
        int tgt = targets[static_cast<size_t>(r)];
        if (tgt >= 0) {
            total -= std::log(std::max(static_cast<double>(pm(r, tgt)), 1e-300));
            ++n;
        }
    }
    if (n == 0) throw ContractViolation("cross_entropy: no scored positions");
    Tensor<T> out({1});
    out.at(0) = static_cast<T>(total / n);
    Var<T> loss = tp.emplace(std::move(out), tp.wants_grad(logits.id),
                             [li = logits.id, probs, targets, R, V, n](Tape<T>& t, int self) {
                                 if (!t.wants_grad(li)) return;
                                 T g = t.node(self).grad.at(0);
                                 Tensor<T>& pg = t.grad_ref(li);
                                 auto gm = pg.mat(R, V);
                                 auto pm2 = probs.mat(R, V);
                                 T c = g / static_cast<T>(n);
                                 for (int64_t r = 0; r < R; ++r) {
                                     int tgt = targets[static_cast<size_t>(r)];
                                     if (tgt < 0) continue;
                                     gm.row(r) += pm2.row(r) * c;
                                     gm(r, tgt) -= c;
                                 }
                             });
    return {loss, n};
}

}  // namespace flowbridge
