#include "slasim/nn.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <unordered_map>

namespace slasim::nn {

EncoderStack::EncoderStack(const EncoderConfig& cfg, ParamStore& store,
                           const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
  if (cfg.hidden == 0 || cfg.heads == 0 || cfg.hidden % cfg.heads != 0) {
    throw std::invalid_argument(
        "encoder: hidden size must be divisible by the number of heads");
  }
  const std::size_t d = cfg.hidden;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    Layer ly;
    ly.wq = &store.create(p + ".wq", d, d, rng);
    ly.bq = &store.create_const(p + ".bq", 1, d, 0.0);
    ly.wk = &store.create(p + ".wk", d, d, rng);
    ly.bk = &store.create_const(p + ".bk", 1, d, 0.0);
    ly.wv = &store.create(p + ".wv", d, d, rng);
    ly.bv = &store.create_const(p + ".bv", 1, d, 0.0);
    ly.wo = &store.create(p + ".wo", d, d, rng);
    ly.bo = &store.create_const(p + ".bo", 1, d, 0.0);
    ly.ln1_g = &store.create_const(p + ".ln1.gamma", 1, d, 1.0);
    ly.ln1_b = &store.create_const(p + ".ln1.beta", 1, d, 0.0);
    ly.ln2_g = &store.create_const(p + ".ln2.gamma", 1, d, 1.0);
    ly.ln2_b = &store.create_const(p + ".ln2.beta", 1, d, 0.0);
    ly.w1 = &store.create(p + ".mlp.w1", d, cfg.mlp, rng);
    ly.b1 = &store.create_const(p + ".mlp.b1", 1, cfg.mlp, 0.0);
    ly.w2 = &store.create(p + ".mlp.w2", cfg.mlp, d, rng);
    ly.b2 = &store.create_const(p + ".mlp.b2", 1, d, 0.0);
    layers_.push_back(ly);
  }
}

TensorRef EncoderStack::forward(Tape& tape, TensorRef tokens) const {
  if (tape.rows(tokens) < 1) {
    throw std::invalid_argument("encoder_forward: empty sequence");
  }
  if (tape.cols(tokens) != cfg_.hidden) {
    throw std::invalid_argument("encoder_forward: token width " +
                                std::to_string(tape.cols(tokens)) +
                                " != hidden size " +
                                std::to_string(cfg_.hidden));
  }
  const std::size_t d = cfg_.hidden;
  const std::size_t dh = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  TensorRef x = tokens;
  for (const Layer& ly : layers_) {
    // attention sublayer
    TensorRef h = tape.layer_norm(x, tape.param(*ly.ln1_g),
                                  tape.param(*ly.ln1_b), 1e-5);
    TensorRef q = tape.add(tape.matmul(h, tape.param(*ly.wq)), tape.param(*ly.bq));
    TensorRef k = tape.add(tape.matmul(h, tape.param(*ly.wk)), tape.param(*ly.bk));
    TensorRef v = tape.add(tape.matmul(h, tape.param(*ly.wv)), tape.param(*ly.bv));
    std::vector<TensorRef> heads;
    for (std::size_t i = 0; i < cfg_.heads; ++i) {
      TensorRef qi = tape.slice_cols(q, i * dh, dh);
      TensorRef ki = tape.slice_cols(k, i * dh, dh);
      TensorRef vi = tape.slice_cols(v, i * dh, dh);
      heads.push_back(tape.attention(qi, ki, vi, scale));
    }
    TensorRef o = tape.concat_cols(heads);
    o = tape.add(tape.matmul(o, tape.param(*ly.wo)), tape.param(*ly.bo));
    x = tape.add(x, o);
    // MLP sublayer
    TensorRef h2 = tape.layer_norm(x, tape.param(*ly.ln2_g),
                                   tape.param(*ly.ln2_b), 1e-5);
    TensorRef m =
        tape.relu(tape.add(tape.matmul(h2, tape.param(*ly.w1)), tape.param(*ly.b1)));
    m = tape.add(tape.matmul(m, tape.param(*ly.w2)), tape.param(*ly.b2));
    x = tape.add(x, m);
  }
  return x;
}

namespace {

// exp via Cody-Waite range reduction and a degree-8 Taylor polynomial;
// relative error ~3e-10 on the softmax range. Branch-free and built from
// shift-left only (SSE2 has no 64-bit arithmetic right shift), so it both
// inlines into the attention loop and vectorizes, which std::exp (an opaque
// libm call) cannot. Inputs below -708 clamp to exp(-708) ~ 3e-308 rather
// than flushing to zero; softmax weights that small are already noise.
inline double fast_exp(double x) {
  static constexpr double kInvLn2 = 1.4426950408889634074;
  static constexpr double kLn2Hi = 6.93147180369123816490e-01;
  static constexpr double kLn2Lo = 1.90821492927058770002e-10;
  // round-to-nearest via the 2^52 shifter (avoids a libm rint call)
  static constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52
  const double xc = x < -708.0 ? -708.0 : x;
  const double kshifted = xc * kInvLn2 + kShift;
  const double kd = kshifted - kShift;
  std::uint64_t kbits;  // low bits of the mantissa hold k (two's complement)
  std::memcpy(&kbits, &kshifted, sizeof kbits);
  const double r = (xc - kd * kLn2Hi) - kd * kLn2Lo;
  double p = 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  // 2^k: the shift discards everything above the exponent field, so the
  // unextended low bits of k are enough
  const std::uint64_t bits = (kbits + 1023) << 52;
  double two_k;
  std::memcpy(&two_k, &bits, sizeof two_k);
  return p * two_k;
}

// dot product with four partial sums so the compiler can keep SIMD lanes
// busy (a single-accumulator reduction cannot be vectorized without
// reassociation, which we do not enable globally)
inline double dot_fast(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t c = 0;
  for (; c + 4 <= n; c += 4) {
    s0 += a[c] * b[c];
    s1 += a[c + 1] * b[c + 1];
    s2 += a[c + 2] * b[c + 2];
    s3 += a[c + 3] * b[c + 3];
  }
  for (; c < n; ++c) s0 += a[c] * b[c];
  return (s0 + s1) + (s2 + s3);
}

void layer_norm_fast(const double* in, double* out, std::size_t L,
                     std::size_t d, const double* gamma, const double* beta) {
  for (std::size_t i = 0; i < L; ++i) {
    const double* row = &in[i * d];
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + 1e-5);
    double* orow = &out[i * d];
    for (std::size_t j = 0; j < d; ++j)
      orow[j] = (row[j] - mean) * istd * gamma[j] + beta[j];
  }
}

// out (L, n) = in (L, m) @ w (m, n) + b (1, n)
void affine_fast(const double* in, double* out, std::size_t L, std::size_t m,
                 std::size_t n, const double* w, const double* b) {
  for (std::size_t i = 0; i < L; ++i) {
    double* orow = &out[i * n];
    for (std::size_t j = 0; j < n; ++j) orow[j] = b[j];
    const double* irow = &in[i * m];
    for (std::size_t p = 0; p < m; ++p) {
      const double v = irow[p];
      if (v == 0.0) continue;
      const double* wrow = &w[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += v * wrow[j];
    }
  }
}

// raw-pointer view of one encoder layer's parameters, so the hot loop below
// can live in a plain free function (target_clones does not apply to member
// functions under GCC)
struct LayerView {
  const double *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  const double *ln1_g, *ln1_b, *ln2_g, *ln2_b;
  const double *w1, *b1, *w2, *b2;
};

// The whole per-layer loop, cloned per ISA and dispatched at load time so
// the inference path uses AVX where the host has it while the binary stays
// runnable on baseline x86-64. `flatten` pulls the helpers above into each
// clone; otherwise they would compile once at the baseline ISA.
__attribute__((target_clones("avx512f", "avx2", "default"), flatten)) void
encoder_forward_fast_impl(const LayerView* layers, std::size_t num_layers,
                          std::size_t d, std::size_t heads, std::size_t mlp_dim,
                          double* x, std::size_t L) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> h(L * d), q(L * d), k(L * d), v(L * d), o(L * d);
  std::vector<double> probs(L), mlp(L * mlp_dim);
  for (std::size_t li = 0; li < num_layers; ++li) {
    const LayerView& ly = layers[li];
    layer_norm_fast(x, h.data(), L, d, ly.ln1_g, ly.ln1_b);
    affine_fast(h.data(), q.data(), L, d, d, ly.wq, ly.bq);
    affine_fast(h.data(), k.data(), L, d, d, ly.wk, ly.bk);
    affine_fast(h.data(), v.data(), L, d, d, ly.wv, ly.bv);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = &q[i * d + off];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          probs[j] = dot_fast(qi, &k[j * d + off], dh) * scale;
          mx = std::max(mx, probs[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          probs[j] = fast_exp(probs[j] - mx);
          sum += probs[j];
        }
        const double inv = 1.0 / sum;
        double* orow = &o[i * d + off];
        for (std::size_t c = 0; c < dh; ++c) orow[c] = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          const double p = probs[j] * inv;
          const double* vj = &v[j * d + off];
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
        }
      }
    }
    affine_fast(o.data(), h.data(), L, d, d, ly.wo, ly.bo);
    for (std::size_t i = 0; i < L * d; ++i) x[i] += h[i];
    layer_norm_fast(x, h.data(), L, d, ly.ln2_g, ly.ln2_b);
    affine_fast(h.data(), mlp.data(), L, d, mlp_dim, ly.w1, ly.b1);
    for (double& m : mlp)
      if (m < 0.0) m = 0.0;
    affine_fast(mlp.data(), h.data(), L, mlp_dim, d, ly.w2, ly.b2);
    for (std::size_t i = 0; i < L * d; ++i) x[i] += h[i];
  }
}

// 64-byte-aligned double storage so every 8-lane vector access lands on one
// cache line instead of straddling two.
template <class T, std::size_t A>
struct AlignedAlloc {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = AlignedAlloc<U, A>;
  };
  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U, A>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(A)));
  }
  void deallocate(T* p, std::size_t) {
    ::operator delete(p, std::align_val_t(A));
  }
  bool operator==(const AlignedAlloc&) const { return true; }
};
using avec = std::vector<double, AlignedAlloc<double, 64>>;

// Lane-interleaved ("structure of arrays") copies of one layer's parameters
// for up to 8 stacks: element idx of lane l lives at [idx * 8 + l]. This lets
// one fused pass advance all stacks with one vector op per element.
struct LayerSoA {
  avec wq, bq, wk, bk, wv, bv, wo, bo;
  avec ln1_g, ln1_b, ln2_g, ln2_b, w1, b1, w2, b2;
};

constexpr std::size_t kLanes = 8;  // widest fused block

// The vector-return ABI warning does not apply: fast_expv only ever inlines
// into the ISA-cloned kernels below.
#pragma GCC diagnostic ignored "-Wpsabi"

// GCC vector types, one element per fused lane. Attributes do not survive
// template-argument passing, so these carry their natural alignment: every
// buffer handed to the kernels below must be 64-byte aligned (avec above).
typedef double vd8 __attribute__((vector_size(8 * sizeof(double))));
typedef std::int64_t vi8 __attribute__((vector_size(8 * sizeof(double))));
typedef double vd4 __attribute__((vector_size(4 * sizeof(double))));
typedef std::int64_t vi4 __attribute__((vector_size(4 * sizeof(double))));

// fast_exp on all lanes at once; element-wise identical arithmetic.
template <class VD, class VI>
inline VD fast_expv(VD x) {
  static constexpr double kInvLn2 = 1.4426950408889634074;
  static constexpr double kLn2Hi = 6.93147180369123816490e-01;
  static constexpr double kLn2Lo = 1.90821492927058770002e-10;
  static constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52
  const VD clampv = (VD){} - 708.0;
  const VD xc = x < -708.0 ? clampv : x;
  const VD kshifted = xc * kInvLn2 + kShift;
  const VD kd = kshifted - kShift;
  VI kbits;
  std::memcpy(&kbits, &kshifted, sizeof kbits);
  const VD r = (xc - kd * kLn2Hi) - kd * kLn2Lo;
  VD p = (VD){} + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const VI bits = (kbits + 1023) << 52;
  VD two_k;
  std::memcpy(&two_k, &bits, sizeof two_k);
  return p * two_k;
}

// Same per-layer loop as encoder_forward_fast_impl, but over NL independent
// stacks at once, one SIMD lane each. Token buffers are lane-interleaved like
// the parameters. lens[l] is lane l's true sequence length; attention masks
// keys beyond it, and rows beyond it carry garbage the caller must ignore.
// The lane results do not depend on NL: every operation is element-wise.
// The lane loops use GCC vector types rather than the autovectorizer, which
// refuses to if-convert the masked softmax. x must be 64-byte aligned like
// the internal scratch; every vector access then lands on natural alignment
// (d * NL and (d / heads) * NL doubles are multiples of the vector width).
template <std::size_t NL, class VD, class VI>
inline void encoder_forward_lanes(const LayerSoA* layers,
                                  std::size_t num_layers, std::size_t d,
                                  std::size_t heads, std::size_t mlp_dim,
                                  double* x, std::size_t Lmax,
                                  const std::size_t* lens) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t xd = d * NL;  // one interleaved row
  avec hb(Lmax * xd), qb(Lmax * xd), kb(Lmax * xd), vb(Lmax * xd),
      ob(Lmax * xd);
  avec pb(Lmax * NL), mb(Lmax * mlp_dim * NL), maskb(Lmax * NL);
  VD* probs = reinterpret_cast<VD*>(pb.data());
  // additive attention mask: 0 for real keys, a large negative for padding
  VD* maskadd = reinterpret_cast<VD*>(maskb.data());
  for (std::size_t j = 0; j < Lmax; ++j)
    for (std::size_t l = 0; l < NL; ++l)
      maskb[j * NL + l] = j < lens[l] ? 0.0 : -1e30;

  auto layer_norm_l = [&](const double* in, double* out, const double* g,
                          const double* b) {
    const VD* gv = reinterpret_cast<const VD*>(g);
    const VD* bv = reinterpret_cast<const VD*>(b);
    for (std::size_t i = 0; i < Lmax; ++i) {
      const VD* row = reinterpret_cast<const VD*>(in + i * xd);
      VD* orow = reinterpret_cast<VD*>(out + i * xd);
      VD mean = {};
      for (std::size_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<double>(d);
      VD var = {};
      for (std::size_t j = 0; j < d; ++j) {
        const VD c = row[j] - mean;
        var += c * c;
      }
      var = var / static_cast<double>(d) + 1e-5;
      VD istd;
      for (std::size_t l = 0; l < NL; ++l) istd[l] = 1.0 / std::sqrt(var[l]);
      for (std::size_t j = 0; j < d; ++j)
        orow[j] = (row[j] - mean) * istd * gv[j] + bv[j];
    }
  };
  auto affine_l = [&](const double* in, double* out, std::size_t m,
                      std::size_t n, const double* w, const double* b) {
    const VD* bv = reinterpret_cast<const VD*>(b);
    for (std::size_t i = 0; i < Lmax; ++i) {
      const VD* irow = reinterpret_cast<const VD*>(in + i * m * NL);
      VD* orow = reinterpret_cast<VD*>(out + i * n * NL);
      for (std::size_t j = 0; j < n; ++j) orow[j] = bv[j];
      for (std::size_t p = 0; p < m; ++p) {
        const VD iv = irow[p];
        const VD* wrow = reinterpret_cast<const VD*>(w + p * n * NL);
        for (std::size_t j = 0; j < n; ++j) orow[j] += iv * wrow[j];
      }
    }
  };

  for (std::size_t li = 0; li < num_layers; ++li) {
    const LayerSoA& ly = layers[li];
    layer_norm_l(x, hb.data(), ly.ln1_g.data(), ly.ln1_b.data());
    affine_l(hb.data(), qb.data(), d, d, ly.wq.data(), ly.bq.data());
    affine_l(hb.data(), kb.data(), d, d, ly.wk.data(), ly.bk.data());
    affine_l(hb.data(), vb.data(), d, d, ly.wv.data(), ly.bv.data());
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh * NL;
      for (std::size_t i = 0; i < Lmax; ++i) {
        const VD* qi = reinterpret_cast<const VD*>(&qb[i * xd + off]);
        VD mx = (VD){} - 1e300;
        for (std::size_t j = 0; j < Lmax; ++j) {
          const VD* kj = reinterpret_cast<const VD*>(&kb[j * xd + off]);
          VD acc = {};
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          const VD s = acc * scale + maskadd[j];
          probs[j] = s;
          mx = s > mx ? s : mx;
        }
        VD sum = {};
        for (std::size_t j = 0; j < Lmax; ++j) {
          const VD e = fast_expv<VD, VI>(probs[j] - mx);
          probs[j] = e;
          sum += e;
        }
        const VD inv = ((VD){} + 1.0) / sum;
        VD* oi = reinterpret_cast<VD*>(&ob[i * xd + off]);
        for (std::size_t c = 0; c < dh; ++c) oi[c] = (VD){};
        for (std::size_t j = 0; j < Lmax; ++j) {
          const VD pl = probs[j] * inv;
          const VD* vj = reinterpret_cast<const VD*>(&vb[j * xd + off]);
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pl * vj[c];
        }
      }
    }
    affine_l(ob.data(), hb.data(), d, d, ly.wo.data(), ly.bo.data());
    for (std::size_t i = 0; i < Lmax * xd; ++i) x[i] += hb[i];
    layer_norm_l(x, hb.data(), ly.ln2_g.data(), ly.ln2_b.data());
    affine_l(hb.data(), mb.data(), d, mlp_dim, ly.w1.data(), ly.b1.data());
    VD* mv = reinterpret_cast<VD*>(mb.data());
    for (std::size_t i = 0; i < Lmax * mlp_dim; ++i)
      mv[i] = mv[i] > 0.0 ? mv[i] : (VD){};
    affine_l(mb.data(), hb.data(), mlp_dim, d, ly.w2.data(), ly.b2.data());
    for (std::size_t i = 0; i < Lmax * xd; ++i) x[i] += hb[i];
  }
}

// ISA-cloned entry points (target_clones cannot go on a template). The
// 4-lane variant halves the vector work when at most 4 stacks are fused.
__attribute__((target_clones("avx512f", "avx2", "default"), flatten)) void
encoder_forward_multi4_impl(const LayerSoA* layers, std::size_t num_layers,
                            std::size_t d, std::size_t heads,
                            std::size_t mlp_dim, double* x, std::size_t Lmax,
                            const std::size_t* lens) {
  encoder_forward_lanes<4, vd4, vi4>(layers, num_layers, d, heads, mlp_dim, x,
                                     Lmax, lens);
}

__attribute__((target_clones("avx512f", "avx2", "default"), flatten)) void
encoder_forward_multi8_impl(const LayerSoA* layers, std::size_t num_layers,
                            std::size_t d, std::size_t heads,
                            std::size_t mlp_dim, double* x, std::size_t Lmax,
                            const std::size_t* lens) {
  encoder_forward_lanes<8, vd8, vi8>(layers, num_layers, d, heads, mlp_dim, x,
                                     Lmax, lens);
}

void interleave(const std::vector<double>& src, avec& dst, std::size_t lane,
                std::size_t nl) {
  if (dst.size() != src.size() * nl) dst.assign(src.size() * nl, 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i * nl + lane] = src[i];
}

}  // namespace

void EncoderStack::forward_fast_multi(
    std::span<const EncoderStack* const> stacks,
    std::span<std::vector<double>* const> xs,
    std::span<const std::size_t> lens) {
  if (stacks.empty() || stacks.size() != xs.size() ||
      xs.size() != lens.size()) {
    throw std::invalid_argument("forward_fast_multi: size mismatch");
  }
  const EncoderConfig& cfg = stacks[0]->cfg_;
  const std::size_t d = cfg.hidden;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const EncoderConfig& c = stacks[s]->cfg_;
    if (c.num_layers != cfg.num_layers || c.hidden != cfg.hidden ||
        c.mlp != cfg.mlp || c.heads != cfg.heads) {
      throw std::invalid_argument("forward_fast_multi: stack shape mismatch");
    }
    if (lens[s] < 1 || xs[s]->size() != lens[s] * d) {
      throw std::invalid_argument("forward_fast_multi: bad token buffer");
    }
  }
  for (std::size_t base = 0; base < stacks.size(); base += kLanes) {
    const std::size_t count = std::min(kLanes, stacks.size() - base);
    const std::size_t nl = count <= 4 ? 4 : 8;
    // unused lanes duplicate the first stack of the block; their output is
    // never read back
    auto pick = [&](std::size_t l) { return base + std::min(l, count - 1); };
    std::size_t lmax = 1;
    std::size_t ln[kLanes];
    for (std::size_t l = 0; l < nl; ++l) {
      ln[l] = lens[pick(l)];
      lmax = std::max(lmax, ln[l]);
    }
    std::vector<LayerSoA> soa(cfg.num_layers);
    for (std::size_t li = 0; li < cfg.num_layers; ++li) {
      for (std::size_t l = 0; l < nl; ++l) {
        const Layer& ly = stacks[pick(l)]->layers_[li];
        interleave(ly.wq->value, soa[li].wq, l, nl);
        interleave(ly.bq->value, soa[li].bq, l, nl);
        interleave(ly.wk->value, soa[li].wk, l, nl);
        interleave(ly.bk->value, soa[li].bk, l, nl);
        interleave(ly.wv->value, soa[li].wv, l, nl);
        interleave(ly.bv->value, soa[li].bv, l, nl);
        interleave(ly.wo->value, soa[li].wo, l, nl);
        interleave(ly.bo->value, soa[li].bo, l, nl);
        interleave(ly.ln1_g->value, soa[li].ln1_g, l, nl);
        interleave(ly.ln1_b->value, soa[li].ln1_b, l, nl);
        interleave(ly.ln2_g->value, soa[li].ln2_g, l, nl);
        interleave(ly.ln2_b->value, soa[li].ln2_b, l, nl);
        interleave(ly.w1->value, soa[li].w1, l, nl);
        interleave(ly.b1->value, soa[li].b1, l, nl);
        interleave(ly.w2->value, soa[li].w2, l, nl);
        interleave(ly.b2->value, soa[li].b2, l, nl);
      }
    }
    avec xi(lmax * d * nl, 0.0);
    for (std::size_t l = 0; l < nl; ++l) {
      const std::vector<double>& src = *xs[pick(l)];
      for (std::size_t i = 0; i < ln[l]; ++i)
        for (std::size_t j = 0; j < d; ++j)
          xi[(i * d + j) * nl + l] = src[i * d + j];
    }
    if (nl == 4) {
      encoder_forward_multi4_impl(soa.data(), cfg.num_layers, d, cfg.heads,
                                  cfg.mlp, xi.data(), lmax, ln);
    } else {
      encoder_forward_multi8_impl(soa.data(), cfg.num_layers, d, cfg.heads,
                                  cfg.mlp, xi.data(), lmax, ln);
    }
    for (std::size_t l = 0; l < count; ++l) {
      std::vector<double>& dst = *xs[base + l];
      for (std::size_t i = 0; i < ln[l]; ++i)
        for (std::size_t j = 0; j < d; ++j)
          dst[i * d + j] = xi[(i * d + j) * nl + l];
    }
  }
}

void EncoderStack::forward_fast(std::vector<double>& x, std::size_t L) const {
  const std::size_t d = cfg_.hidden;
  if (L < 1 || x.size() != L * d) {
    throw std::invalid_argument("encoder forward_fast: bad token buffer");
  }
  std::vector<LayerView> views;
  views.reserve(layers_.size());
  for (const Layer& ly : layers_) {
    views.push_back({ly.wq->value.data(), ly.bq->value.data(),
                     ly.wk->value.data(), ly.bk->value.data(),
                     ly.wv->value.data(), ly.bv->value.data(),
                     ly.wo->value.data(), ly.bo->value.data(),
                     ly.ln1_g->value.data(), ly.ln1_b->value.data(),
                     ly.ln2_g->value.data(), ly.ln2_b->value.data(),
                     ly.w1->value.data(), ly.b1->value.data(),
                     ly.w2->value.data(), ly.b2->value.data()});
  }
  encoder_forward_fast_impl(views.data(), views.size(), d, cfg_.heads,
                            cfg_.mlp, x.data(), L);
}

TensorRef mean_pool(Tape& tape, TensorRef tokens) {
  if (tape.rows(tokens) < 1) {
    throw std::invalid_argument("mean_pool: empty sequence");
  }
  return tape.mean_rows(tokens);
}

std::vector<double> positional_encoding(std::size_t len, std::size_t d) {
  if (len < 1) throw std::invalid_argument("positional_encoding: len < 1");
  std::vector<double> pe(len * d, 0.0);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t j = 0; j < d; ++j) {
      const double rate =
          std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

const std::vector<double>& positional_encoding_cached(std::size_t len,
                                                      std::size_t d) {
  thread_local std::unordered_map<std::uint64_t, std::vector<double>> cache;
  const std::uint64_t key = (static_cast<std::uint64_t>(len) << 32) | d;
  auto it = cache.find(key);
  if (it == cache.end()) {
    it = cache.emplace(key, positional_encoding(len, d)).first;
  }
  return it->second;
}

TensorRef bce_loss(Tape& tape, TensorRef preds, std::span<const int> labels) {
  const std::size_t k = tape.rows(preds);
  if (tape.cols(preds) != 1 || labels.size() != k) {
    throw std::invalid_argument("bce_loss: preds must be (K,1) matching labels");
  }
  std::vector<double> y(k), yc(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw std::invalid_argument("bce_loss: label not in {0,1}");
    }
    y[i] = static_cast<double>(labels[i]);
    yc[i] = 1.0 - y[i];
  }
  TensorRef p = tape.clamp(preds, 1e-7, 1.0 - 1e-7);
  TensorRef yl = tape.input(k, 1, y);
  TensorRef ycl = tape.input(k, 1, yc);
  TensorRef one_minus_p = tape.add_const(tape.scalar_mul(p, -1.0), 1.0);
  TensorRef term = tape.add(tape.mul(yl, tape.log(p)),
                            tape.mul(ycl, tape.log(one_minus_p)));
  return tape.scalar_mul(tape.mean_all(term), -1.0);
}

TensorRef kl_div(Tape& tape, std::span<const double> target, TensorRef pred) {
  const std::size_t n = target.size();
  if (tape.rows(pred) != 1 || tape.cols(pred) != n) {
    throw std::invalid_argument("kl_div: length mismatch");
  }
  double t_entropy = 0.0;  // sum t log t with 0 log 0 = 0
  for (double t : target) {
    if (t < 0.0) throw std::invalid_argument("kl_div: negative target entry");
    if (t > 0.0) t_entropy += t * std::log(t);
  }
  TensorRef lp = tape.log(tape.clamp(pred, 1e-8, 1.0));
  TensorRef tl = tape.input(1, n, target);
  TensorRef cross = tape.sum_all(tape.mul(tl, lp));
  return tape.add_const(tape.scalar_mul(cross, -1.0), t_entropy);
}

}  // namespace slasim::nn
