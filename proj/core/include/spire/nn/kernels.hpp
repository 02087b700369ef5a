#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "spire/common.hpp"
#include "spire/tensor.hpp"

// Forward/backward kernels for the layers HRPE is built from. Convolution is
// cross-correlation (no kernel flip), zero padded. Every kernel writes each
// output element from exactly one worker, so results are independent of the
// worker count.

namespace spire::nn {

template <class T>
inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Valid output range for one kernel tap: 0 <= ow*stride + kw - pad < in_w.
inline void tap_range(std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t in_w,
                      std::int64_t out_w, std::int64_t& lo, std::int64_t& hi) {
    std::int64_t lo_num = pad - kw;
    lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    std::int64_t hi_num = in_w - 1 + pad - kw;
    hi = hi_num < 0 ? -1 : std::min(out_w - 1, hi_num / stride);
}

}  // namespace detail

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                         int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw ValidationError("conv2d: input and weight must be 4-D");
    if (stride < 1 || pad < 0) throw ValidationError("conv2d: bad stride/pad");
    const std::int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), win = x.dim(3);
    const std::int64_t oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ic)
        throw ValidationError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                              " input channels, got " + std::to_string(ic));
    if (b.size() != 0 && b.size() != oc) throw ValidationError("conv2d: bias size mismatch");
    const std::int64_t oh = conv_out_extent<T>(h, kh, stride, pad);
    const std::int64_t ow = conv_out_extent<T>(win, kw, stride, pad);
    if (oh < 1 || ow < 1) throw ValidationError("conv2d: empty output for input " + x.shape_str());

    Tensor<T> y({n, oc, oh, ow});
    const T* xd = x.data();
    const T* wd = w.data();
    const T* bd = b.size() ? b.data() : nullptr;
    T* yd = y.data();

    parallel_for(n * oc, 4, [&](std::int64_t jb, std::int64_t je) {
        for (std::int64_t j = jb; j < je; ++j) {
            const std::int64_t ni = j / oc, oci = j % oc;
            for (std::int64_t r = 0; r < oh; ++r) {
                T* yrow = yd + ((ni * oc + oci) * oh + r) * ow;
                const T bias = bd ? bd[oci] : T(0);
                for (std::int64_t q = 0; q < ow; ++q) yrow[q] = bias;
                for (std::int64_t ci = 0; ci < ic; ++ci) {
                    const T* xch = xd + (ni * ic + ci) * h * win;
                    const T* wch = wd + (oci * ic + ci) * kh * kw;
                    for (std::int64_t p = 0; p < kh; ++p) {
                        const std::int64_t ih = r * stride + p - pad;
                        if (ih < 0 || ih >= h) continue;
                        const T* xrow = xch + ih * win;
                        for (std::int64_t q = 0; q < kw; ++q) {
                            std::int64_t lo, hi;
                            detail::tap_range(q, stride, pad, win, ow, lo, hi);
                            const T wv = wch[p * kw + q];
                            const T* xs = xrow + q - pad;
                            if (stride == 1) {
                                for (std::int64_t o = lo; o <= hi; ++o) yrow[o] += wv * xs[o];
                            } else {
                                for (std::int64_t o = lo; o <= hi; ++o)
                                    yrow[o] += wv * xs[o * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    return y;
}

// dx is overwritten when non-null; dw/db are accumulated into when non-null.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                     int pad, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
    const std::int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), win = x.dim(3);
    const std::int64_t oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    if (dy.dim(0) != n || dy.dim(1) != oc) throw ValidationError("conv2d backward: dy shape mismatch");
    const T* xd = x.data();
    const T* wd = w.data();
    const T* dyd = dy.data();

    if (db) {
        T* dbd = db->data();
        for (std::int64_t oci = 0; oci < oc; ++oci) {
            T acc = 0;
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* row = dyd + (ni * oc + oci) * oh * ow;
                for (std::int64_t i = 0; i < oh * ow; ++i) acc += row[i];
            }
            dbd[oci] += acc;
        }
    }

    if (dw) {
        T* dwd = dw->data();
        parallel_for(oc, 2, [&](std::int64_t ob, std::int64_t oe) {
            for (std::int64_t oci = ob; oci < oe; ++oci) {
                for (std::int64_t ci = 0; ci < ic; ++ci) {
                    T* wch = dwd + (oci * ic + ci) * kh * kw;
                    for (std::int64_t p = 0; p < kh; ++p) {
                        for (std::int64_t q = 0; q < kw; ++q) {
                            std::int64_t lo, hi;
                            detail::tap_range(q, stride, pad, win, ow, lo, hi);
                            T acc = 0;
                            for (std::int64_t ni = 0; ni < n; ++ni) {
                                const T* xch = xd + (ni * ic + ci) * h * win;
                                const T* dych = dyd + (ni * oc + oci) * oh * ow;
                                for (std::int64_t r = 0; r < oh; ++r) {
                                    const std::int64_t ih = r * stride + p - pad;
                                    if (ih < 0 || ih >= h) continue;
                                    const T* xs = xch + ih * win + q - pad;
                                    const T* dyrow = dych + r * ow;
                                    if (stride == 1) {
                                        for (std::int64_t o = lo; o <= hi; ++o)
                                            acc += dyrow[o] * xs[o];
                                    } else {
                                        for (std::int64_t o = lo; o <= hi; ++o)
                                            acc += dyrow[o] * xs[o * stride];
                                    }
                                }
                            }
                            wch[p * kw + q] += acc;
                        }
                    }
                }
            }
        });
    }

    if (dx) {
        dx->fill(T(0));
        T* dxd = dx->data();
        parallel_for(n * ic, 4, [&](std::int64_t jb, std::int64_t je) {
            for (std::int64_t j = jb; j < je; ++j) {
                const std::int64_t ni = j / ic, ci = j % ic;
                T* dxch = dxd + (ni * ic + ci) * h * win;
                for (std::int64_t oci = 0; oci < oc; ++oci) {
                    const T* wch = wd + (oci * ic + ci) * kh * kw;
                    const T* dych = dyd + (ni * oc + oci) * oh * ow;
                    for (std::int64_t p = 0; p < kh; ++p) {
                        for (std::int64_t q = 0; q < kw; ++q) {
                            std::int64_t lo, hi;
                            detail::tap_range(q, stride, pad, win, ow, lo, hi);
                            const T wv = wch[p * kw + q];
                            for (std::int64_t r = 0; r < oh; ++r) {
                                const std::int64_t ih = r * stride + p - pad;
                                if (ih < 0 || ih >= h) continue;
                                T* dxs = dxch + ih * win + q - pad;
                                const T* dyrow = dych + r * ow;
                                if (stride == 1) {
                                    for (std::int64_t o = lo; o <= hi; ++o) dxs[o] += wv * dyrow[o];
                                } else {
                                    for (std::int64_t o = lo; o <= hi; ++o)
                                        dxs[o * stride] += wv * dyrow[o];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

/// Depthwise convolution: weight C x 1 x kh x kw, channel c of the output
/// depends only on channel c of the input.
template <class T>
Tensor<T> depthwise_conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                   int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4) throw ValidationError("depthwise: input and weight must be 4-D");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), win = x.dim(3);
    if (w.dim(0) != c || w.dim(1) != 1)
        throw ValidationError("depthwise: weight must be C x 1 x kh x kw with C == input channels");
    if (b.size() != 0 && b.size() != c) throw ValidationError("depthwise: bias size mismatch");
    const std::int64_t kh = w.dim(2), kw = w.dim(3);
    const std::int64_t oh = conv_out_extent<T>(h, kh, stride, pad);
    const std::int64_t ow = conv_out_extent<T>(win, kw, stride, pad);
    if (oh < 1 || ow < 1) throw ValidationError("depthwise: empty output");

    Tensor<T> y({n, c, oh, ow});
    const T* xd = x.data();
    const T* wd = w.data();
    const T* bd = b.size() ? b.data() : nullptr;
    T* yd = y.data();
    parallel_for(n * c, 8, [&](std::int64_t jb, std::int64_t je) {
        for (std::int64_t j = jb; j < je; ++j) {
            const std::int64_t ci = j % c;
            const T* xch = xd + j * h * win;
            const T* wch = wd + ci * kh * kw;
            T* ych = yd + j * oh * ow;
            const T bias = bd ? bd[ci] : T(0);
            for (std::int64_t r = 0; r < oh; ++r) {
                T* yrow = ych + r * ow;
                for (std::int64_t o = 0; o < ow; ++o) yrow[o] = bias;
                for (std::int64_t p = 0; p < kh; ++p) {
                    const std::int64_t ih = r * stride + p - pad;
                    if (ih < 0 || ih >= h) continue;
                    const T* xrow = xch + ih * win;
                    for (std::int64_t q = 0; q < kw; ++q) {
                        std::int64_t lo, hi;
                        detail::tap_range(q, stride, pad, win, ow, lo, hi);
                        const T wv = wch[p * kw + q];
                        const T* xs = xrow + q - pad;
                        if (stride == 1) {
                            for (std::int64_t o = lo; o <= hi; ++o) yrow[o] += wv * xs[o];
                        } else {
                            for (std::int64_t o = lo; o <= hi; ++o) yrow[o] += wv * xs[o * stride];
                        }
                    }
                }
            }
        }
    });
    return y;
}

template <class T>
void depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               int stride, int pad, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), win = x.dim(3);
    const std::int64_t kh = w.dim(2), kw = w.dim(3);
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    const T* xd = x.data();
    const T* wd = w.data();
    const T* dyd = dy.data();

    if (db) {
        T* dbd = db->data();
        for (std::int64_t ci = 0; ci < c; ++ci) {
            T acc = 0;
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* row = dyd + (ni * c + ci) * oh * ow;
                for (std::int64_t i = 0; i < oh * ow; ++i) acc += row[i];
            }
            dbd[ci] += acc;
        }
    }
    if (dw) {
        T* dwd = dw->data();
        parallel_for(c, 4, [&](std::int64_t cb, std::int64_t ce) {
            for (std::int64_t ci = cb; ci < ce; ++ci) {
                T* wch = dwd + ci * kh * kw;
                for (std::int64_t p = 0; p < kh; ++p) {
                    for (std::int64_t q = 0; q < kw; ++q) {
                        std::int64_t lo, hi;
                        detail::tap_range(q, stride, pad, win, ow, lo, hi);
                        T acc = 0;
                        for (std::int64_t ni = 0; ni < n; ++ni) {
                            const T* xch = xd + (ni * c + ci) * h * win;
                            const T* dych = dyd + (ni * c + ci) * oh * ow;
                            for (std::int64_t r = 0; r < oh; ++r) {
                                const std::int64_t ih = r * stride + p - pad;
                                if (ih < 0 || ih >= h) continue;
                                const T* xs = xch + ih * win + q - pad;
                                const T* dyrow = dych + r * ow;
                                if (stride == 1) {
                                    for (std::int64_t o = lo; o <= hi; ++o) acc += dyrow[o] * xs[o];
                                } else {
                                    for (std::int64_t o = lo; o <= hi; ++o)
                                        acc += dyrow[o] * xs[o * stride];
                                }
                            }
                        }
                        wch[p * kw + q] += acc;
                    }
                }
            }
        });
    }
    if (dx) {
        dx->fill(T(0));
        T* dxd = dx->data();
        parallel_for(n * c, 8, [&](std::int64_t jb, std::int64_t je) {
            for (std::int64_t j = jb; j < je; ++j) {
                const std::int64_t ci = j % c;
                T* dxch = dxd + j * h * win;
                const T* wch = wd + ci * kh * kw;
                const T* dych = dyd + j * oh * ow;
                for (std::int64_t p = 0; p < kh; ++p) {
                    for (std::int64_t q = 0; q < kw; ++q) {
                        std::int64_t lo, hi;
                        detail::tap_range(q, stride, pad, win, ow, lo, hi);
                        const T wv = wch[p * kw + q];
                        for (std::int64_t r = 0; r < oh; ++r) {
                            const std::int64_t ih = r * stride + p - pad;
                            if (ih < 0 || ih >= h) continue;
                            T* dxs = dxch + ih * win + q - pad;
                            const T* dyrow = dych + r * ow;
                            if (stride == 1) {
                                for (std::int64_t o = lo; o <= hi; ++o) dxs[o] += wv * dyrow[o];
                            } else {
                                for (std::int64_t o = lo; o <= hi; ++o)
                                    dxs[o * stride] += wv * dyrow[o];
                            }
                        }
                    }
                }
            }
        });
    }
}

/// Per-channel batch normalization. Population (1/M) variance is used both
/// for normalization and for the running-stat update.
template <class T>
struct BnCache {
    Tensor<T> mean;    // C
    Tensor<T> invstd;  // C
};

template <class T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                              T momentum, T eps, BnCache<T>* cache) {
    if (x.ndim() != 4) throw ValidationError("batchnorm: input must be 4-D");
    if (eps <= T(0)) throw ValidationError("batchnorm: eps must be > 0");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c)
        throw ValidationError("batchnorm: per-channel parameter size mismatch");
    const std::int64_t m = n * h * w;
    Tensor<T> y(x.shape());
    if (cache) {
        cache->mean = Tensor<T>({c});
        cache->invstd = Tensor<T>({c});
    }
    const T* xd = x.data();
    T* yd = y.data();
    parallel_for(c, 4, [&](std::int64_t cb, std::int64_t ce) {
        for (std::int64_t ci = cb; ci < ce; ++ci) {
            T mean, var;
            if (train) {
                T s = 0;
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    const T* p = xd + (ni * c + ci) * h * w;
                    for (std::int64_t i = 0; i < h * w; ++i) s += p[i];
                }
                mean = s / static_cast<T>(m);
                T sq = 0;
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    const T* p = xd + (ni * c + ci) * h * w;
                    for (std::int64_t i = 0; i < h * w; ++i) {
                        const T d = p[i] - mean;
                        sq += d * d;
                    }
                }
                var = sq / static_cast<T>(m);
                running_mean[ci] = (T(1) - momentum) * running_mean[ci] + momentum * mean;
                running_var[ci] = (T(1) - momentum) * running_var[ci] + momentum * var;
            } else {
                mean = running_mean[ci];
                var = running_var[ci];
            }
            const T invstd = T(1) / std::sqrt(var + eps);
            if (cache) {
                cache->mean[ci] = mean;
                cache->invstd[ci] = invstd;
            }
            const T g = gamma[ci], b = beta[ci];
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* p = xd + (ni * c + ci) * h * w;
                T* q = yd + (ni * c + ci) * h * w;
                for (std::int64_t i = 0; i < h * w; ++i) q[i] = g * (p[i] - mean) * invstd + b;
            }
        }
    });
    return y;
}

// Train-mode backward: gradients flow through the batch statistics.
template <class T>
void batchnorm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma, const BnCache<T>& cache,
                          const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t m = n * h * w;
    const T* xd = x.data();
    const T* dyd = dy.data();
    T* dxd = dx ? dx->data() : nullptr;
    parallel_for(c, 4, [&](std::int64_t cb, std::int64_t ce) {
        for (std::int64_t ci = cb; ci < ce; ++ci) {
            const T mean = cache.mean[ci], invstd = cache.invstd[ci];
            T sum_dy = 0, sum_dy_xhat = 0;
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* xp = xd + (ni * c + ci) * h * w;
                const T* gp = dyd + (ni * c + ci) * h * w;
                for (std::int64_t i = 0; i < h * w; ++i) {
                    const T xhat = (xp[i] - mean) * invstd;
                    sum_dy += gp[i];
                    sum_dy_xhat += gp[i] * xhat;
                }
            }
            if (dbeta) (*dbeta)[ci] += sum_dy;
            if (dgamma) (*dgamma)[ci] += sum_dy_xhat;
            if (dxd) {
                const T g = gamma[ci];
                const T inv_m = T(1) / static_cast<T>(m);
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    const T* xp = xd + (ni * c + ci) * h * w;
                    const T* gp = dyd + (ni * c + ci) * h * w;
                    T* dp = dxd + (ni * c + ci) * h * w;
                    for (std::int64_t i = 0; i < h * w; ++i) {
                        const T xhat = (xp[i] - mean) * invstd;
                        dp[i] = g * invstd * (gp[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                    }
                }
            }
        }
    });
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
    return dx;
}

template <class T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    return y;
}

// Takes the forward output, not the input.
template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    Tensor<T> dx(y.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
    return dx;
}

/// Spatial mean per channel: N x C x H x W -> N x C.
template <class T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ValidationError("global_avg_pool: input must be 4-D");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> y({n, c});
    for (std::int64_t j = 0; j < n * c; ++j) {
        const T* p = x.data() + j * hw;
        T s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
        y[j] = s / static_cast<T>(hw);
    }
    return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const std::vector<std::int64_t>& x_shape, const Tensor<T>& dy) {
    Tensor<T> dx(x_shape);
    const std::int64_t n = x_shape[0], c = x_shape[1], hw = x_shape[2] * x_shape[3];
    const T scale = T(1) / static_cast<T>(hw);
    for (std::int64_t j = 0; j < n * c; ++j) {
        T* p = dx.data() + j * hw;
        const T g = dy[j] * scale;
        for (std::int64_t i = 0; i < hw; ++i) p[i] = g;
    }
    return dx;
}

/// Fully connected: x N x In, w Out x In, b Out.
template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.ndim() != 2 || w.ndim() != 2) throw ValidationError("linear: x and w must be 2-D");
    const std::int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) throw ValidationError("linear: weight expects " + std::to_string(w.dim(1)) +
                                              " inputs, got " + std::to_string(in));
    if (b.size() != 0 && b.size() != out) throw ValidationError("linear: bias size mismatch");
    Tensor<T> y({n, out});
    for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* xr = x.data() + ni * in;
        for (std::int64_t o = 0; o < out; ++o) {
            const T* wr = w.data() + o * in;
            T s = b.size() ? b[o] : T(0);
            for (std::int64_t i = 0; i < in; ++i) s += wr[i] * xr[i];
            y.at(ni, o) = s;
        }
    }
    return y;
}

template <class T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
    const std::int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (db) {
        for (std::int64_t o = 0; o < out; ++o) {
            T s = 0;
            for (std::int64_t ni = 0; ni < n; ++ni) s += dy.at(ni, o);
            (*db)[o] += s;
        }
    }
    if (dw) {
        for (std::int64_t o = 0; o < out; ++o) {
            T* wr = dw->data() + o * in;
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T g = dy.at(ni, o);
                const T* xr = x.data() + ni * in;
                for (std::int64_t i = 0; i < in; ++i) wr[i] += g * xr[i];
            }
        }
    }
    if (dx) {
        dx->fill(T(0));
        for (std::int64_t ni = 0; ni < n; ++ni) {
            T* xr = dx->data() + ni * in;
            for (std::int64_t o = 0; o < out; ++o) {
                const T g = dy.at(ni, o);
                const T* wr = w.data() + o * in;
                for (std::int64_t i = 0; i < in; ++i) xr[i] += g * wr[i];
            }
        }
    }
}

/// Splits on the channel axis at `at`; concat(split(x)) == x.
template <class T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x, std::int64_t at) {
    if (x.ndim() != 4) throw ValidationError("channel_split: input must be 4-D");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (at <= 0 || at >= c) throw ValidationError("channel_split: split point out of range");
    Tensor<T> a({n, at, x.dim(2), x.dim(3)});
    Tensor<T> b({n, c - at, x.dim(2), x.dim(3)});
    for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* src = x.data() + ni * c * hw;
        std::copy(src, src + at * hw, a.data() + ni * at * hw);
        std::copy(src + at * hw, src + c * hw, b.data() + ni * (c - at) * hw);
    }
    return {std::move(a), std::move(b)};
}

template <class T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 4 || b.ndim() != 4) throw ValidationError("channel_concat: inputs must be 4-D");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ValidationError("channel_concat: spatial/batch shape mismatch");
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor<T> y({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::int64_t ni = 0; ni < n; ++ni) {
        T* dst = y.data() + ni * (ca + cb) * hw;
        std::copy(a.data() + ni * ca * hw, a.data() + (ni + 1) * ca * hw, dst);
        std::copy(b.data() + ni * cb * hw, b.data() + (ni + 1) * cb * hw, dst + ca * hw);
    }
    return y;
}

/// Channel g*(C/groups)+i moves to index i*groups+g (reshape-transpose).
template <class T>
Tensor<T> channel_shuffle(const Tensor<T>& x, int groups) {
    if (x.ndim() != 4) throw ValidationError("channel_shuffle: input must be 4-D");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (groups < 1 || c % groups != 0)
        throw ValidationError("channel_shuffle: channel count " + std::to_string(c) +
                              " not divisible by groups " + std::to_string(groups));
    const std::int64_t cpg = c / groups;
    Tensor<T> y(x.shape());
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t g = 0; g < groups; ++g) {
            for (std::int64_t i = 0; i < cpg; ++i) {
                const T* src = x.data() + (ni * c + g * cpg + i) * hw;
                T* dst = y.data() + (ni * c + i * groups + g) * hw;
                std::copy(src, src + hw, dst);
            }
        }
    }
    return y;
}

/// Inverse permutation of channel_shuffle(groups) is channel_shuffle(C/groups).
template <class T>
Tensor<T> channel_shuffle_backward(const Tensor<T>& dy, int groups) {
    const std::int64_t c = dy.dim(1);
    return channel_shuffle(dy, static_cast<int>(c / groups));
}

/// 3x3 max pool, stride 1, pad 1 with below-everything padding; output keeps
/// the input size. Optionally records the flat argmax (first row-major on ties).
template <class T>
Tensor<T> maxpool2d_3x3_s1_forward(const Tensor<T>& x, Tensor<std::int64_t>* argmax = nullptr) {
    if (x.ndim() != 4) throw ValidationError("maxpool: input must be 4-D");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y(x.shape());
    if (argmax) *argmax = Tensor<std::int64_t>(x.shape());
    for (std::int64_t j = 0; j < n * c; ++j) {
        const T* xch = x.data() + j * h * w;
        T* ych = y.data() + j * h * w;
        std::int64_t* am = argmax ? argmax->data() + j * h * w : nullptr;
        for (std::int64_t r = 0; r < h; ++r) {
            for (std::int64_t q = 0; q < w; ++q) {
                T best = -std::numeric_limits<T>::infinity();
                std::int64_t best_i = -1;
                for (std::int64_t dr = -1; dr <= 1; ++dr) {
                    const std::int64_t rr = r + dr;
                    if (rr < 0 || rr >= h) continue;
                    for (std::int64_t dq = -1; dq <= 1; ++dq) {
                        const std::int64_t qq = q + dq;
                        if (qq < 0 || qq >= w) continue;
                        const T v = xch[rr * w + qq];
                        if (v > best) {
                            best = v;
                            best_i = rr * w + qq;
                        }
                    }
                }
                ych[r * w + q] = best;
                if (am) am[r * w + q] = best_i;
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> maxpool2d_3x3_s1_backward(const Tensor<std::int64_t>& argmax, const Tensor<T>& dy) {
    Tensor<T> dx(dy.shape());
    const std::int64_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    for (std::int64_t j = 0; j < n * c; ++j) {
        const std::int64_t* am = argmax.data() + j * hw;
        const T* g = dy.data() + j * hw;
        T* d = dx.data() + j * hw;
        for (std::int64_t i = 0; i < hw; ++i) d[am[i]] += g[i];
    }
    return dx;
}

/// Mean squared error over all elements; gradient w.r.t. pred is
/// 2*(pred - target)/numel.
template <class T>
T mse_loss(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* dpred = nullptr) {
    if (!pred.same_shape(target))
        throw ValidationError("mse_loss: shape mismatch " + pred.shape_str() + " vs " +
                              target.shape_str());
    const std::int64_t n = pred.size();
    T acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T d = pred[i] - target[i];
        acc += d * d;
    }
    if (dpred) {
        *dpred = Tensor<T>(pred.shape());
        const T scale = T(2) / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) (*dpred)[i] = scale * (pred[i] - target[i]);
    }
    return acc / static_cast<T>(n);
}

}  // namespace spire::nn
