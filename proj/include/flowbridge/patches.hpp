#pragma once

#include "flowbridge/autograd.hpp"
#include "flowbridge/tensor.hpp"

namespace flowbridge {

// Non-overlapping patch tokenization: [B, C, H, W] -> [B, L, C*ps*ps] with
// L = (H/ps)*(W/ps), token order row-major over the patch grid. unpatchify is
// the bit-exact inverse.

inline void check_patch_dims(int C, int H, int W, int ps) {
    if (ps <= 0 || H % ps != 0 || W % ps != 0)
        throw DimensionError("image " + std::to_string(C) + "x" + std::to_string(H) + "x" +
                             std::to_string(W) + " not divisible by patch size " +
                             std::to_string(ps));
}

template <typename T>
Tensor<T> patchify_tensor(const Tensor<T>& x, int ps) {
    const bool batched = x.ndim() == 4;
    if (!batched && x.ndim() != 3) throw DimensionError("patchify expects [C,H,W] or [B,C,H,W]");
    const int B = batched ? x.dim(0) : 1;
    const int C = x.dim(batched ? 1 : 0), H = x.dim(batched ? 2 : 1), W = x.dim(batched ? 3 : 2);
    check_patch_dims(C, H, W, ps);
    const int gh = H / ps, gw = W / ps, L = gh * gw, D = C * ps * ps;
    Tensor<T> out(batched ? std::vector<int>{B, L, D} : std::vector<int>{L, D});
    for (int b = 0; b < B; ++b)
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px) {
                int64_t tok = (static_cast<int64_t>(b) * L + py * gw + px) * D;
                for (int c = 0; c < C; ++c)
                    for (int iy = 0; iy < ps; ++iy)
                        for (int ix = 0; ix < ps; ++ix)
                            out.data[static_cast<size_t>(tok + (c * ps + iy) * ps + ix)] =
                                x.data[static_cast<size_t>(
                                    ((static_cast<int64_t>(b) * C + c) * H + py * ps + iy) * W +
                                    px * ps + ix)];
            }
    return out;
}

template <typename T>
Tensor<T> unpatchify_tensor(const Tensor<T>& tokens, int ps, int C, int H, int W) {
    const bool batched = tokens.ndim() == 3;
    if (!batched && tokens.ndim() != 2) throw DimensionError("unpatchify expects [L,D] or [B,L,D]");
    check_patch_dims(C, H, W, ps);
    const int B = batched ? tokens.dim(0) : 1;
    const int gh = H / ps, gw = W / ps, L = gh * gw, D = C * ps * ps;
    if (tokens.dim(batched ? 1 : 0) != L || tokens.dim(batched ? 2 : 1) != D)
        throw DimensionError("unpatchify: token shape " + shape_str(tokens.shape) +
                             " does not match image " + std::to_string(C) + "x" +
                             std::to_string(H) + "x" + std::to_string(W));
    Tensor<T> out(batched ? std::vector<int>{B, C, H, W} : std::vector<int>{C, H, W});
    for (int b = 0; b < B; ++b)
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px) {
                int64_t tok = (static_cast<int64_t>(b) * L + py * gw + px) * D;
                for (int c = 0; c < C; ++c)
                    for (int iy = 0; iy < ps; ++iy)
                        for (int ix = 0; ix < ps; ++ix)
                            out.data[static_cast<size_t>(
                                ((static_cast<int64_t>(b) * C + c) * H + py * ps + iy) * W +
                                px * ps + ix)] = tokens.data[static_cast<size_t>(tok + (c * ps + iy) * ps + ix)];
            }
    return out;
}

template <typename T>
Var<T> patchify(Var<T> x, int ps) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = x.value();
    Tensor<T> out = patchify_tensor(xv, ps);
    const bool batched = xv.ndim() == 4;
    const int C = xv.dim(batched ? 1 : 0), H = xv.dim(batched ? 2 : 1), W = xv.dim(batched ? 3 : 2);
    return tp.emplace(std::move(out), tp.wants_grad(x.id),
                      [xi = x.id, ps, C, H, W](Tape<T>& t, int self) {
                          if (!t.wants_grad(xi)) return;
                          Tensor<T> gx = unpatchify_tensor(t.node(self).grad, ps, C, H, W);
                          Tensor<T>& pg = t.grad_ref(xi);
                          for (int64_t i = 0; i < gx.size(); ++i) pg.at(i) += gx.at(i);
                      });
}

template <typename T>
Var<T> unpatchify(Var<T> tokens, int ps, int C, int H, int W) {
    Tape<T>& tp = *tokens.tape;
    Tensor<T> out = unpatchify_tensor(tokens.value(), ps, C, H, W);
    return tp.emplace(std::move(out), tp.wants_grad(tokens.id),
                      [ti = tokens.id, ps](Tape<T>& t, int self) {
                          if (!t.wants_grad(ti)) return;
                          Tensor<T> gt = patchify_tensor(t.node(self).grad, ps);
                          Tensor<T>& pg = t.grad_ref(ti);
                          for (int64_t i = 0; i < gt.size(); ++i) pg.at(i) += gt.at(i);
                      });
}

}  // namespace flowbridge
