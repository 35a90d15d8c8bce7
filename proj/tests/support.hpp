#pragma once

// Brute-force reference implementations used as oracles. These must stay
// independent of the library's kernels: plain nested loops, no shared code.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spectra/model.hpp"
#include "spectra/rng.hpp"
#include "spectra/tensor.hpp"

namespace oracle {

// conv2d over [Ci,H,W] with weight [Co,Ci,kh,kw], stride 1, zero padding
inline std::vector<double> conv2d(const std::vector<double>& x, int ci, int h, int w,
                                  const std::vector<double>& wt, int co, int kh, int kw,
                                  const std::vector<double>& bias, int ph, int pw) {
    const int oh = h + 2 * ph - kh + 1;
    const int ow = w + 2 * pw - kw + 1;
    std::vector<double> y(static_cast<std::size_t>(co) * oh * ow, 0.0);
    for (int c = 0; c < co; ++c) {
        for (int p = 0; p < oh; ++p) {
            for (int q = 0; q < ow; ++q) {
                double acc = bias[static_cast<std::size_t>(c)];
                for (int ic = 0; ic < ci; ++ic) {
                    for (int r = 0; r < kh; ++r) {
                        for (int s = 0; s < kw; ++s) {
                            const int ih = p + r - ph;
                            const int iw = q + s - pw;
                            if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                            acc += wt[static_cast<std::size_t>(((c * ci + ic) * kh + r) * kw + s)] *
                                   x[static_cast<std::size_t>((ic * h + ih) * w + iw)];
                        }
                    }
                }
                y[static_cast<std::size_t>((c * oh + p) * ow + q)] = acc;
            }
        }
    }
    return y;
}

// conv3d over [Ci,D,H,W] with weight [Co,Ci,kd,kh,kw]
inline std::vector<double> conv3d(const std::vector<double>& x, int ci, int d, int h, int w,
                                  const std::vector<double>& wt, int co, int kd, int kh, int kw,
                                  const std::vector<double>& bias, int pd, int ph, int pw) {
    const int od = d + 2 * pd - kd + 1;
    const int oh = h + 2 * ph - kh + 1;
    const int ow = w + 2 * pw - kw + 1;
    std::vector<double> y(static_cast<std::size_t>(co) * od * oh * ow, 0.0);
    for (int c = 0; c < co; ++c) {
        for (int u = 0; u < od; ++u) {
            for (int p = 0; p < oh; ++p) {
                for (int q = 0; q < ow; ++q) {
                    double acc = bias[static_cast<std::size_t>(c)];
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int t = 0; t < kd; ++t) {
                            for (int r = 0; r < kh; ++r) {
                                for (int s = 0; s < kw; ++s) {
                                    const int id = u + t - pd;
                                    const int ih = p + r - ph;
                                    const int iw = q + s - pw;
                                    if (id < 0 || id >= d || ih < 0 || ih >= h || iw < 0 || iw >= w) {
                                        continue;
                                    }
                                    acc += wt[static_cast<std::size_t>(
                                               (((c * ci + ic) * kd + t) * kh + r) * kw + s)] *
                                           x[static_cast<std::size_t>(((ic * d + id) * h + ih) * w + iw)];
                                }
                            }
                        }
                    }
                    y[static_cast<std::size_t>(((c * od + u) * oh + p) * ow + q)] = acc;
                }
            }
        }
    }
    return y;
}

// single-head scaled dot-product attention rows, naive
inline std::vector<double> attention(const std::vector<double>& q, const std::vector<double>& k,
                                     const std::vector<double>& v, int n, int dk) {
    std::vector<double> out(static_cast<std::size_t>(n) * dk, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int i = 0; i < n; ++i) {
        std::vector<double> scores(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int t = 0; t < dk; ++t) {
                dot += q[static_cast<std::size_t>(i * dk + t)] * k[static_cast<std::size_t>(j * dk + t)];
            }
            scores[static_cast<std::size_t>(j)] = dot * scale;
            mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
            denom += scores[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < n; ++j) {
            const double wgt = scores[static_cast<std::size_t>(j)] / denom;
            for (int t = 0; t < dk; ++t) {
                out[static_cast<std::size_t>(i * dk + t)] += wgt * v[static_cast<std::size_t>(j * dk + t)];
            }
        }
    }
    return out;
}

// y = x W^T + b with plain loops, for oracle compositions
inline std::vector<double> naive_linear(const std::vector<double>& x, int rows, int in,
                                        const std::vector<double>& w, int out,
                                        const std::vector<double>& b) {
    std::vector<double> y(static_cast<std::size_t>(rows) * out, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int o = 0; o < out; ++o) {
            double acc = b[static_cast<std::size_t>(o)];
            for (int i = 0; i < in; ++i) {
                acc += x[static_cast<std::size_t>(r * in + i)] * w[static_cast<std::size_t>(o * in + i)];
            }
            y[static_cast<std::size_t>(r * out + o)] = acc;
        }
    }
    return y;
}

inline std::vector<double> naive_layernorm(const std::vector<double>& x, int rows, int k,
                                           const std::vector<double>& gamma,
                                           const std::vector<double>& beta, double eps) {
    std::vector<double> y(x.size());
    for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int j = 0; j < k; ++j) mean += x[static_cast<std::size_t>(r * k + j)];
        mean /= k;
        double var = 0.0;
        for (int j = 0; j < k; ++j) {
            const double d = x[static_cast<std::size_t>(r * k + j)] - mean;
            var += d * d;
        }
        var /= k;
        const double istd = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < k; ++j) {
            y[static_cast<std::size_t>(r * k + j)] =
                gamma[static_cast<std::size_t>(j)] *
                    (x[static_cast<std::size_t>(r * k + j)] - mean) * istd +
                beta[static_cast<std::size_t>(j)];
        }
    }
    return y;
}

// full multi-head attention for one sample, naive loops on top of attention()
inline std::vector<double> naive_mhsa(const std::vector<double>& tokens, int n, int z, int heads,
                                      const spectra::ModelParams& p, const std::string& enc) {
    const int dk = z / heads;
    auto q = naive_linear(tokens, n, z, p.at(enc + ".q.weight").data(), z, p.at(enc + ".q.bias").data());
    auto k = naive_linear(tokens, n, z, p.at(enc + ".k.weight").data(), z, p.at(enc + ".k.bias").data());
    auto v = naive_linear(tokens, n, z, p.at(enc + ".v.weight").data(), z, p.at(enc + ".v.bias").data());
    std::vector<double> ctx(static_cast<std::size_t>(n) * z, 0.0);
    for (int h = 0; h < heads; ++h) {
        std::vector<double> qh(static_cast<std::size_t>(n) * dk), kh(qh.size()), vh(qh.size());
        for (int i = 0; i < n; ++i) {
            for (int t = 0; t < dk; ++t) {
                qh[static_cast<std::size_t>(i * dk + t)] = q[static_cast<std::size_t>(i * z + h * dk + t)];
                kh[static_cast<std::size_t>(i * dk + t)] = k[static_cast<std::size_t>(i * z + h * dk + t)];
                vh[static_cast<std::size_t>(i * dk + t)] = v[static_cast<std::size_t>(i * z + h * dk + t)];
            }
        }
        auto oh = attention(qh, kh, vh, n, dk);
        for (int i = 0; i < n; ++i) {
            for (int t = 0; t < dk; ++t) {
                ctx[static_cast<std::size_t>(i * z + h * dk + t)] = oh[static_cast<std::size_t>(i * dk + t)];
            }
        }
    }
    return naive_linear(ctx, n, z, p.at(enc + ".out.weight").data(), z, p.at(enc + ".out.bias").data());
}

// softmax-then-log cross entropy, the naive (unstabilized) form
inline double cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels,
                            int batch, int classes) {
    double total = 0.0;
    for (int b = 0; b < batch; ++b) {
        double denom = 0.0;
        for (int j = 0; j < classes; ++j) {
            denom += std::exp(logits[static_cast<std::size_t>(b * classes + j)]);
        }
        const double p =
            std::exp(logits[static_cast<std::size_t>(b * classes + labels[static_cast<std::size_t>(b)])]) /
            denom;
        total += -std::log(p);
    }
    return total / batch;
}

struct Moments {
    std::vector<double> mean, var;  // biased variance
};

// per-channel statistics over every axis except `channel_axis`
inline Moments channel_moments(const std::vector<double>& x, const spectra::Shape& shape,
                               int channel_axis) {
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < channel_axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    for (int i = channel_axis + 1; i < static_cast<int>(shape.size()); ++i) {
        inner *= shape[static_cast<std::size_t>(i)];
    }
    const std::int64_t channels = shape[static_cast<std::size_t>(channel_axis)];
    Moments mo;
    mo.mean.assign(static_cast<std::size_t>(channels), 0.0);
    mo.var.assign(static_cast<std::size_t>(channels), 0.0);
    const std::int64_t m = outer * inner;
    for (std::int64_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < inner; ++i) {
                s += x[static_cast<std::size_t>((o * channels + c) * inner + i)];
            }
        }
        mo.mean[static_cast<std::size_t>(c)] = s / static_cast<double>(m);
        double v = 0.0;
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < inner; ++i) {
                const double d = x[static_cast<std::size_t>((o * channels + c) * inner + i)] -
                                 mo.mean[static_cast<std::size_t>(c)];
                v += d * d;
            }
        }
        mo.var[static_cast<std::size_t>(c)] = v / static_cast<double>(m);
    }
    return mo;
}

// Cohen's kappa and friends, coded from the definition
struct MetricsOracle {
    double oa = 0.0, aa = 0.0, kappa = 0.0;
};

inline MetricsOracle metrics(const std::vector<std::int64_t>& cm, int n) {
    double total = 0.0, trace = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) total += static_cast<double>(cm[static_cast<std::size_t>(i * n + j)]);
        trace += static_cast<double>(cm[static_cast<std::size_t>(i * n + i)]);
    }
    MetricsOracle r;
    r.oa = trace / total;
    double aa = 0.0;
    int rows = 0;
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        for (int j = 0; j < n; ++j) row += static_cast<double>(cm[static_cast<std::size_t>(i * n + j)]);
        if (row > 0.0) {
            aa += static_cast<double>(cm[static_cast<std::size_t>(i * n + i)]) / row;
            ++rows;
        }
    }
    r.aa = rows > 0 ? aa / rows : 0.0;
    double pe = 0.0;
    for (int i = 0; i < n; ++i) {
        double row = 0.0, col = 0.0;
        for (int j = 0; j < n; ++j) {
            row += static_cast<double>(cm[static_cast<std::size_t>(i * n + j)]);
            col += static_cast<double>(cm[static_cast<std::size_t>(j * n + i)]);
        }
        pe += row * col;
    }
    pe /= total * total;
    if (pe >= 1.0) {
        r.kappa = r.oa >= 1.0 ? 1.0 : 0.0;
    } else {
        r.kappa = (r.oa - pe) / (1.0 - pe);
    }
    return r;
}

struct Ppm {
    int width = 0, height = 0;
    std::vector<std::array<std::uint8_t, 3>> pixels;
};

// minimal binary-PPM (P6) reader; independent of the writer
inline Ppm read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw std::runtime_error("read_ppm: unexpected header");
    in.get();  // single whitespace after maxval
    Ppm ppm;
    ppm.width = w;
    ppm.height = h;
    ppm.pixels.resize(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(ppm.pixels.data()), static_cast<std::streamsize>(ppm.pixels.size() * 3));
    if (!in) throw std::runtime_error("read_ppm: truncated payload");
    return ppm;
}

inline std::vector<double> random_vec(spectra::Rng& rng, std::size_t n, double lo = -1.0,
                                      double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace oracle
