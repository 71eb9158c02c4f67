#include "slasim/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace slasim::ad {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << "(" << r << "x" << c << ")";
  return os.str();
}

[[noreturn]] void shape_error(const char* op, std::size_t ar, std::size_t ac,
                              std::size_t br, std::size_t bc) {
  std::ostringstream os;
  os << "shape mismatch in op '" << op << "': " << shape_str(ar, ac) << " vs "
     << shape_str(br, bc);
  throw std::invalid_argument(os.str());
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

Param& ParamStore::create(const std::string& name, std::size_t rows,
                          std::size_t cols, Rng& rng, std::size_t fan_in) {
  if (index_.count(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  auto p = std::make_unique<Param>();
  p->name = name;
  p->rows = rows;
  p->cols = cols;
  const std::size_t n = rows * cols;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in ? fan_in : rows));
  p->value.resize(n);
  for (auto& v : p->value) v = rng.uniform(-bound, bound);
  p->grad.assign(n, 0.0);
  p->m.assign(n, 0.0);
  p->v.assign(n, 0.0);
  Param* raw = p.get();
  owned_.push_back(std::move(p));
  order_.push_back(raw);
  index_[name] = raw;
  return *raw;
}

Param& ParamStore::create_const(const std::string& name, std::size_t rows,
                                std::size_t cols, double fill) {
  if (index_.count(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  auto p = std::make_unique<Param>();
  p->name = name;
  p->rows = rows;
  p->cols = cols;
  const std::size_t n = rows * cols;
  p->value.assign(n, fill);
  p->grad.assign(n, 0.0);
  p->m.assign(n, 0.0);
  p->v.assign(n, 0.0);
  Param* raw = p.get();
  owned_.push_back(std::move(p));
  order_.push_back(raw);
  index_[name] = raw;
  return *raw;
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
  return *it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
  return *it->second;
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const Param* p : order_) n += p->size();
  return n;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.order_.size() != order_.size()) {
    throw std::invalid_argument("copy_values_from: store layout mismatch");
  }
  for (std::size_t i = 0; i < order_.size(); ++i) {
    const Param& src = *other.order_[i];
    Param& dst = *order_[i];
    if (src.name != dst.name || src.size() != dst.size()) {
      throw std::invalid_argument("copy_values_from: parameter mismatch at " +
                                  dst.name);
    }
    dst.value = src.value;
    dst.m = src.m;
    dst.v = src.v;
  }
}

// ---------------------------------------------------------------------------
// Tape

int Tape::push(std::size_t rows, std::size_t cols) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.val.assign(rows * cols, 0.0);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

Tape::Node& Tape::node(TensorRef t) { return nodes_[static_cast<std::size_t>(t.id)]; }
const Tape::Node& Tape::node(TensorRef t) const {
  return nodes_[static_cast<std::size_t>(t.id)];
}

void Tape::check(TensorRef t) const {
  if (t.id < 0 || static_cast<std::size_t>(t.id) >= nodes_.size()) {
    throw std::invalid_argument("invalid tensor handle");
  }
}

TensorRef Tape::input(std::size_t rows, std::size_t cols,
                      std::span<const double> values) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("input: value count does not match shape " +
                                shape_str(rows, cols));
  }
  int id = push(rows, cols);
  std::copy(values.begin(), values.end(), nodes_[id].val.begin());
  return {id};
}

TensorRef Tape::scalar(double v) { return input(1, 1, std::span(&v, 1)); }

TensorRef Tape::param(Param& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return {it->second};
  int id = push(p.rows, p.cols);
  nodes_[id].val = p.value;
  nodes_[id].bound = &p;
  param_nodes_[&p] = id;
  return {id};
}

TensorRef Tape::matmul(TensorRef a, TensorRef b) {
  check(a);
  check(b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.cols != nb.rows) shape_error("matmul", na.rows, na.cols, nb.rows, nb.cols);
  const std::size_t m = na.rows, k = na.cols, n = nb.cols;
  int id = push(m, n);
  {
    auto& out = nodes_[id].val;
    const auto& A = node(a).val;
    const auto& B = node(b).val;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = &B[p * n];
        double* orow = &out[i * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  nodes_[id].back = [this, a, b, id, m, k, n]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    auto& gb = node(b).grad;
    const auto& A = node(a).val;
    const auto& B = node(b).val;
    // dA = G B^T
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* grow = &G[i * n];
        const double* brow = &B[p * n];
        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        ga[i * k + p] += acc;
      }
    }
    // dB = A^T G
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t i = 0; i < m; ++i) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* grow = &G[i * n];
        double* gbrow = &gb[p * n];
        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
      }
    }
  };
  return {id};
}

TensorRef Tape::transpose(TensorRef a) {
  check(a);
  const std::size_t m = node(a).rows, n = node(a).cols;
  int id = push(n, m);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  }
  nodes_[id].back = [this, a, id, m, n]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += G[j * m + i];
  };
  return {id};
}

TensorRef Tape::add(TensorRef a, TensorRef b) {
  check(a);
  check(b);
  const Node& na = node(a);
  const Node& nb = node(b);
  const std::size_t m = na.rows, n = na.cols;
  const bool broadcast = (nb.rows == 1 && nb.cols == n && m != 1);
  if (!broadcast && (na.rows != nb.rows || na.cols != nb.cols)) {
    shape_error("add", na.rows, na.cols, nb.rows, nb.cols);
  }
  int id = push(m, n);
  {
    const auto& A = node(a).val;
    const auto& B = node(b).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] = A[i * n + j] + B[broadcast ? j : i * n + j];
  }
  nodes_[id].back = [this, a, b, id, m, n, broadcast]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    auto& gb = node(b).grad;
    for (std::size_t i = 0; i < m * n; ++i) ga[i] += G[i];
    if (broadcast) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
    } else {
      for (std::size_t i = 0; i < m * n; ++i) gb[i] += G[i];
    }
  };
  return {id};
}

TensorRef Tape::sub(TensorRef a, TensorRef b) {
  check(a);
  check(b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.rows != nb.rows || na.cols != nb.cols) {
    shape_error("sub", na.rows, na.cols, nb.rows, nb.cols);
  }
  int id = push(na.rows, na.cols);
  {
    const auto& A = node(a).val;
    const auto& B = node(b).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  }
  nodes_[id].back = [this, a, b, id]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    auto& gb = node(b).grad;
    for (std::size_t i = 0; i < G.size(); ++i) {
      ga[i] += G[i];
      gb[i] -= G[i];
    }
  };
  return {id};
}

TensorRef Tape::mul(TensorRef a, TensorRef b) {
  check(a);
  check(b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.rows != nb.rows || na.cols != nb.cols) {
    shape_error("elementwise-multiply", na.rows, na.cols, nb.rows, nb.cols);
  }
  int id = push(na.rows, na.cols);
  {
    const auto& A = node(a).val;
    const auto& B = node(b).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  }
  nodes_[id].back = [this, a, b, id]() {
    const auto& G = nodes_[id].grad;
    const auto& A = node(a).val;
    const auto& B = node(b).val;
    auto& ga = node(a).grad;
    auto& gb = node(b).grad;
    for (std::size_t i = 0; i < G.size(); ++i) {
      ga[i] += G[i] * B[i];
      gb[i] += G[i] * A[i];
    }
  };
  return {id};
}

TensorRef Tape::scalar_mul(TensorRef a, double c) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * A[i];
  }
  nodes_[id].back = [this, a, id, c]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += c * G[i];
  };
  return {id};
}

TensorRef Tape::add_const(TensorRef a, double c) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + c;
  }
  nodes_[id].back = [this, a, id]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
  };
  return {id};
}

TensorRef Tape::exp(TensorRef a) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(A[i]);
  }
  nodes_[id].back = [this, a, id]() {
    const auto& G = nodes_[id].grad;
    const auto& Y = nodes_[id].val;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * Y[i];
  };
  return {id};
}

TensorRef Tape::log(TensorRef a) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (A[i] <= 0.0) {
        throw std::domain_error("log of non-positive value");
      }
      out[i] = std::log(std::max(A[i], 1e-12));
    }
  }
  nodes_[id].back = [this, a, id]() {
    const auto& G = nodes_[id].grad;
    const auto& A = node(a).val;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i)
      ga[i] += G[i] / std::max(A[i], 1e-12);
  };
  return {id};
}

TensorRef Tape::relu(TensorRef a) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
  }
  nodes_[id].back = [this, a, id]() {
    const auto& G = nodes_[id].grad;
    const auto& A = node(a).val;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i)
      if (A[i] > 0.0) ga[i] += G[i];
  };
  return {id};
}

TensorRef Tape::sigmoid(TensorRef a) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = A[i];
      out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
    }
  }
  nodes_[id].back = [this, a, id]() {
    const auto& G = nodes_[id].grad;
    const auto& Y = nodes_[id].val;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i)
      ga[i] += G[i] * Y[i] * (1.0 - Y[i]);
  };
  return {id};
}

TensorRef Tape::clamp(TensorRef a, double lo, double hi) {
  check(a);
  int id = push(node(a).rows, node(a).cols);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::min(std::max(A[i], lo), hi);
  }
  nodes_[id].back = [this, a, id, lo, hi]() {
    const auto& G = nodes_[id].grad;
    const auto& A = node(a).val;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < G.size(); ++i)
      if (A[i] >= lo && A[i] <= hi) ga[i] += G[i];
  };
  return {id};
}

TensorRef Tape::softmax_rows(TensorRef a) {
  check(a);
  const std::size_t m = node(a).rows, n = node(a).cols;
  int id = push(m, n);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = &A[i * n];
      double mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] = std::exp(row[j] - mx);
        sum += out[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
  }
  nodes_[id].back = [this, a, id, m, n]() {
    const auto& G = nodes_[id].grad;
    const auto& Y = nodes_[id].val;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += G[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        ga[i * n + j] += Y[i * n + j] * (G[i * n + j] - dot);
    }
  };
  return {id};
}

TensorRef Tape::attention(TensorRef q, TensorRef k, TensorRef v, double scale) {
  check(q);
  check(k);
  check(v);
  const std::size_t L = node(q).rows, dh = node(q).cols;
  if (node(k).rows != L || node(k).cols != dh) {
    shape_error("attention(k)", L, dh, node(k).rows, node(k).cols);
  }
  if (node(v).rows != L || node(v).cols != dh) {
    shape_error("attention(v)", L, dh, node(v).rows, node(v).cols);
  }
  int id = push(L, dh);
  auto probs = std::make_shared<std::vector<double>>(L * L);
  {
    const auto& Q = node(q).val;
    const auto& K = node(k).val;
    const auto& V = node(v).val;
    auto& out = nodes_[id].val;
    auto& P = *probs;
    for (std::size_t i = 0; i < L; ++i) {
      double* prow = &P[i * L];
      const double* qi = &Q[i * dh];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < L; ++j) {
        const double* kj = &K[j * dh];
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        prow[j] = s * scale;
        mx = std::max(mx, prow[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        sum += prow[j];
      }
      const double inv = 1.0 / sum;
      double* orow = &out[i * dh];
      for (std::size_t j = 0; j < L; ++j) {
        const double p = prow[j] * inv;
        prow[j] = p;
        if (p != 0.0) {
          const double* vj = &V[j * dh];
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
        }
      }
    }
  }
  nodes_[id].back = [this, q, k, v, id, L, dh, scale, probs]() {
    const auto& G = nodes_[id].grad;
    const auto& Q = node(q).val;
    const auto& K = node(k).val;
    const auto& V = node(v).val;
    auto& gq = node(q).grad;
    auto& gk = node(k).grad;
    auto& gv = node(v).grad;
    const auto& P = *probs;
    std::vector<double> ds(L);
    for (std::size_t i = 0; i < L; ++i) {
      const double* prow = &P[i * L];
      const double* grow = &G[i * dh];
      // dP_ij = G_i . V_j, then softmax backward within the row
      double dot = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        const double* vj = &V[j * dh];
        double dp = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dp += grow[c] * vj[c];
        ds[j] = dp;
        dot += dp * prow[j];
      }
      double* gqi = &gq[i * dh];
      const double* qi = &Q[i * dh];
      for (std::size_t j = 0; j < L; ++j) {
        const double p = prow[j];
        // dV_j += P_ij * G_i
        double* gvj = &gv[j * dh];
        for (std::size_t c = 0; c < dh; ++c) gvj[c] += p * grow[c];
        const double dsij = scale * p * (ds[j] - dot);
        if (dsij == 0.0) continue;
        const double* kj = &K[j * dh];
        double* gkj = &gk[j * dh];
        for (std::size_t c = 0; c < dh; ++c) {
          gqi[c] += dsij * kj[c];
          gkj[c] += dsij * qi[c];
        }
      }
    }
  };
  return {id};
}

TensorRef Tape::layer_norm(TensorRef x, TensorRef gamma, TensorRef beta,
                           double eps) {
  check(x);
  check(gamma);
  check(beta);
  const std::size_t m = node(x).rows, n = node(x).cols;
  if (node(gamma).rows != 1 || node(gamma).cols != n) {
    shape_error("layer-norm(gamma)", m, n, node(gamma).rows, node(gamma).cols);
  }
  if (node(beta).rows != 1 || node(beta).cols != n) {
    shape_error("layer-norm(beta)", m, n, node(beta).rows, node(beta).cols);
  }
  int id = push(m, n);
  // cache xhat and inverse std per row for the backward pass
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto istd = std::make_shared<std::vector<double>>(m);
  {
    const auto& X = node(x).val;
    const auto& Gm = node(gamma).val;
    const auto& Bt = node(beta).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = &X[i * n];
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += row[j];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      (*istd)[i] = is;
      for (std::size_t j = 0; j < n; ++j) {
        const double xh = (row[j] - mu) * is;
        (*xhat)[i * n + j] = xh;
        out[i * n + j] = Gm[j] * xh + Bt[j];
      }
    }
  }
  nodes_[id].back = [this, x, gamma, beta, id, m, n, xhat, istd]() {
    const auto& G = nodes_[id].grad;
    const auto& Gm = node(gamma).val;
    auto& gx = node(x).grad;
    auto& gg = node(gamma).grad;
    auto& gb = node(beta).grad;
    for (std::size_t i = 0; i < m; ++i) {
      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double g = G[i * n + j];
        const double xh = (*xhat)[i * n + j];
        gg[j] += g * xh;
        gb[j] += g;
        const double dxh = g * Gm[j];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xh;
      }
      mean_dxh /= static_cast<double>(n);
      mean_dxh_xh /= static_cast<double>(n);
      const double is = (*istd)[i];
      for (std::size_t j = 0; j < n; ++j) {
        const double dxh = G[i * n + j] * Gm[j];
        const double xh = (*xhat)[i * n + j];
        gx[i * n + j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
      }
    }
  };
  return {id};
}

TensorRef Tape::mean_rows(TensorRef a) {
  check(a);
  const std::size_t m = node(a).rows, n = node(a).cols;
  int id = push(1, n);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += A[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  }
  nodes_[id].back = [this, a, id, m, n]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += G[j] * inv;
  };
  return {id};
}

TensorRef Tape::mean_all(TensorRef a) {
  check(a);
  const std::size_t sz = node(a).val.size();
  int id = push(1, 1);
  {
    const auto& A = node(a).val;
    double s = 0.0;
    for (double v : A) s += v;
    nodes_[id].val[0] = s / static_cast<double>(sz);
  }
  nodes_[id].back = [this, a, id, sz]() {
    const double g = nodes_[id].grad[0] / static_cast<double>(sz);
    auto& ga = node(a).grad;
    for (auto& v : ga) v += g;
  };
  return {id};
}

TensorRef Tape::sum_all(TensorRef a) {
  check(a);
  int id = push(1, 1);
  {
    const auto& A = node(a).val;
    double s = 0.0;
    for (double v : A) s += v;
    nodes_[id].val[0] = s;
  }
  nodes_[id].back = [this, a, id]() {
    const double g = nodes_[id].grad[0];
    auto& ga = node(a).grad;
    for (auto& v : ga) v += g;
  };
  return {id};
}

TensorRef Tape::concat_rows(std::span<const TensorRef> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t n = node(parts[0]).cols;
  std::size_t m = 0;
  for (TensorRef p : parts) {
    check(p);
    if (node(p).cols != n)
      shape_error("concat(rows)", node(p).rows, node(p).cols, 0, n);
    m += node(p).rows;
  }
  int id = push(m, n);
  std::vector<TensorRef> ins(parts.begin(), parts.end());
  {
    auto& out = nodes_[id].val;
    std::size_t off = 0;
    for (TensorRef p : ins) {
      const auto& A = node(p).val;
      std::copy(A.begin(), A.end(), out.begin() + off);
      off += A.size();
    }
  }
  nodes_[id].back = [this, ins, id]() {
    const auto& G = nodes_[id].grad;
    std::size_t off = 0;
    for (TensorRef p : ins) {
      auto& ga = node(p).grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += G[off + i];
      off += ga.size();
    }
  };
  return {id};
}

TensorRef Tape::concat_cols(std::span<const TensorRef> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t m = node(parts[0]).rows;
  std::size_t n = 0;
  for (TensorRef p : parts) {
    check(p);
    if (node(p).rows != m)
      shape_error("concat(cols)", node(p).rows, node(p).cols, m, 0);
    n += node(p).cols;
  }
  int id = push(m, n);
  std::vector<TensorRef> ins(parts.begin(), parts.end());
  {
    auto& out = nodes_[id].val;
    std::size_t coff = 0;
    for (TensorRef p : ins) {
      const auto& A = node(p).val;
      const std::size_t pc = node(p).cols;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < pc; ++j)
          out[i * n + coff + j] = A[i * pc + j];
      coff += pc;
    }
  }
  nodes_[id].back = [this, ins, id, m, n]() {
    const auto& G = nodes_[id].grad;
    std::size_t coff = 0;
    for (TensorRef p : ins) {
      auto& ga = node(p).grad;
      const std::size_t pc = node(p).cols;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < pc; ++j)
          ga[i * pc + j] += G[i * n + coff + j];
      coff += pc;
    }
  };
  return {id};
}

TensorRef Tape::slice_cols(TensorRef a, std::size_t start, std::size_t count) {
  check(a);
  const std::size_t m = node(a).rows, n = node(a).cols;
  if (start + count > n) {
    throw std::invalid_argument("slice: column range out of bounds");
  }
  int id = push(m, count);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j)
        out[i * count + j] = A[i * n + start + j];
  }
  nodes_[id].back = [this, a, id, start, count, m, n]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j)
        ga[i * n + start + j] += G[i * count + j];
  };
  return {id};
}

TensorRef Tape::slice_rows(TensorRef a, std::size_t start, std::size_t count) {
  check(a);
  const std::size_t m = node(a).rows, n = node(a).cols;
  if (start + count > m) {
    throw std::invalid_argument("slice: row range out of bounds");
  }
  int id = push(count, n);
  {
    const auto& A = node(a).val;
    auto& out = nodes_[id].val;
    std::copy(A.begin() + start * n, A.begin() + (start + count) * n,
              out.begin());
  }
  nodes_[id].back = [this, a, id, start, count, n]() {
    const auto& G = nodes_[id].grad;
    auto& ga = node(a).grad;
    for (std::size_t i = 0; i < count * n; ++i) ga[start * n + i] += G[i];
  };
  return {id};
}

void Tape::backward(TensorRef loss) {
  check(loss);
  if (backward_done_) {
    throw std::logic_error("backward called twice on a stale tape");
  }
  if (node(loss).val.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar");
  }
  backward_done_ = true;
  for (auto& n : nodes_) n.grad.assign(n.val.size(), 0.0);
  nodes_[loss.id].grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    if (nodes_[i].back) nodes_[i].back();
  }
  for (auto& [p, id] : param_nodes_) {
    Param& prm = *nodes_[id].bound;
    prm.grad = nodes_[id].grad;
    prm.has_grad = true;
  }
}

std::span<const double> Tape::value(TensorRef t) const {
  check(t);
  return node(t).val;
}

std::span<const double> Tape::grad(TensorRef t) const {
  check(t);
  if (!backward_done_) throw std::logic_error("grad read before backward");
  return node(t).grad;
}

std::size_t Tape::rows(TensorRef t) const {
  check(t);
  return node(t).rows;
}

std::size_t Tape::cols(TensorRef t) const {
  check(t);
  return node(t).cols;
}

// ---------------------------------------------------------------------------
// AdamW

void AdamW::step(ParamStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : store.params()) {
    if (!p->has_grad) {
      throw std::runtime_error("adamw_step: missing gradient for parameter " +
                               p->name);
    }
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i];
      p->m[i] = cfg_.beta1 * p->m[i] + (1.0 - cfg_.beta1) * g;
      p->v[i] = cfg_.beta2 * p->v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = p->m[i] / bc1;
      const double vhat = p->v[i] / bc2;
      p->value[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                cfg_.weight_decay * p->value[i]);
    }
    p->has_grad = false;
  }
}

// ---------------------------------------------------------------------------

double finite_difference_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, std::span<const double> analytic, double h) {
  if (x.size() != analytic.size()) {
    throw std::invalid_argument("finite_difference_check: size mismatch");
  }
  std::vector<double> xs(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + h;
    const double fp = f(xs);
    xs[i] = orig - h;
    const double fm = f(xs);
    xs[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max(std::abs(analytic[i]), 1e-8);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace slasim::ad
