#include "semrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace semrec {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ValidationError("tensor: negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void record_op(std::function<void()> adjoint, const Tensor& out) {
  g_active_tape->record({std::move(adjoint), out.id()});
}

void require(bool cond, const std::string& message) {
  if (!cond) throw ValidationError(message);
}

// C[m,p] (+)= A_eff[m,k] · B_eff[k,p]; physical A is [k,m] when trans_a,
// physical B is [p,k] when trans_b. Accumulates each output row in float64.
// Exact-zero left factors are skipped, so a masked-out probability can never
// perturb an output even at the sign-of-zero level.
void gemm(bool trans_a, bool trans_b, int m, int k, int p, const float* a, const float* b,
          float* c, bool accumulate) {
  std::vector<double> acc(static_cast<size_t>(p));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int t = 0; t < k; ++t) {
      const double av = trans_a ? a[static_cast<size_t>(t) * m + i] : a[static_cast<size_t>(i) * k + t];
      if (av == 0.0) continue;
      if (trans_b) {
        for (int j = 0; j < p; ++j) acc[j] += av * b[static_cast<size_t>(j) * k + t];
      } else {
        const float* brow = b + static_cast<size_t>(t) * p;
        for (int j = 0; j < p; ++j) acc[j] += av * brow[j];
      }
    }
    float* crow = c + static_cast<size_t>(i) * p;
    if (accumulate) {
      for (int j = 0; j < p; ++j) crow[j] += static_cast<float>(acc[j]);
    } else {
      for (int j = 0; j < p; ++j) crow[j] = static_cast<float>(acc[j]);
    }
  }
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

detail::TensorStorage& Tensor::st() {
  if (!storage_) throw ValidationError("tensor: use of undefined tensor");
  return *storage_;
}

const detail::TensorStorage& Tensor::st() const {
  if (!storage_) throw ValidationError("tensor: use of undefined tensor");
  return *storage_;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t;
  t.storage_ = std::make_shared<detail::TensorStorage>();
  int64_t n = shape_numel(shape);
  t.storage_->shape = std::move(shape);
  t.storage_->values.assign(static_cast<size_t>(n), value);
  t.storage_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> values, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw ValidationError("tensor: data length " + std::to_string(values.size()) +
                          " does not match shape " + shape_str(shape));
  Tensor t;
  t.storage_ = std::make_shared<detail::TensorStorage>();
  t.storage_->shape = std::move(shape);
  t.storage_->values = std::move(values);
  t.storage_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, float stddev, std::mt19937& rng, bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<float> data(static_cast<size_t>(n));
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& x : data) x = dist(rng);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

const std::vector<int>& Tensor::shape() const { return st().shape; }

int Tensor::dim(int axis) const {
  const auto& s = st().shape;
  require(axis >= 0 && axis < static_cast<int>(s.size()), "tensor: axis out of range");
  return s[axis];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(st().values.size()); }

std::span<float> Tensor::values() { return st().values; }
std::span<const float> Tensor::values() const { return st().values; }

float Tensor::at(int i) const {
  require(i >= 0 && i < numel(), "tensor: index out of range");
  return st().values[static_cast<size_t>(i)];
}

float Tensor::at(int i, int j) const {
  require(rank() == 2, "tensor: at(i,j) requires rank 2");
  require(i >= 0 && i < dim(0) && j >= 0 && j < dim(1), "tensor: index out of range");
  return st().values[static_cast<size_t>(i) * dim(1) + j];
}

float Tensor::item() const {
  require(numel() == 1, "tensor: item() requires a scalar, got shape " + shape_str(shape()));
  return st().values[0];
}

bool Tensor::requires_grad() const { return st().requires_grad; }
void Tensor::set_requires_grad(bool on) { st().requires_grad = on; }
bool Tensor::has_grad() const { return !st().grad.empty(); }

std::span<float> Tensor::grad() {
  require(has_grad(), "tensor: gradient not populated");
  return st().grad;
}

std::span<const float> Tensor::grad() const {
  require(has_grad(), "tensor: gradient not populated");
  return st().grad;
}

void Tensor::ensure_grad() {
  auto& s = st();
  if (s.grad.empty()) s.grad.assign(s.values.size(), 0.0f);
}

void Tensor::zero_grad() {
  auto& s = st();
  std::fill(s.grad.begin(), s.grad.end(), 0.0f);
}

void Tensor::drop_grad() { st().grad.clear(); }

// ---- AttnMask ---------------------------------------------------------------

AttnMask AttnMask::causal(int n) {
  AttnMask m(n, n, false);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

AttnMask AttnMask::prefix(int n) const {
  require(n >= 0 && n <= rows && n <= cols, "mask: prefix size out of range");
  AttnMask m(n, n, false);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m.set(i, j, at(i, j));
  return m;
}

// ---- Tape -------------------------------------------------------------------

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward: loss must be a defined scalar");
  if (consumed_)
    throw ValidationError("backward: tape already consumed; call reset() before reusing it");
  bool found = false;
  for (const auto& op : ops_)
    if (op.output_id == loss.id()) {
      found = true;
      break;
    }
  if (!found) throw ValidationError("backward: loss was not produced by ops on this tape");
  Tensor seed = loss;
  seed.ensure_grad();
  seed.grad()[0] = 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->adjoint();
  consumed_ = true;
}

void Tape::reset() {
  ops_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

// ---- op helpers -------------------------------------------------------------

void check_finite(std::span<const float> data, const char* op_name) {
  for (float x : data)
    if (!std::isfinite(x))
      throw DivergenceError(std::string(op_name) + ": non-finite value in output");
}

namespace {

Tensor finish(Tensor out, bool tracked, const char* op_name) {
  check_finite(out.values(), op_name);
  if (tracked) out.set_requires_grad(true);
  return out;
}

// Accumulate g into target's grad buffer.
void axpy_grad(Tensor& target, std::span<const float> g) {
  target.ensure_grad();
  auto dst = target.grad();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor out = Tensor::zeros({m, p});
  gemm(false, false, m, k, p, a.values().data(), b.values().data(), out.values().data(), false);
  bool tracked = tracking({&a, &b});
  out = finish(std::move(out), tracked, "matmul");
  if (tracked) {
    Tensor ca = a, cb = b, co = out;
    record_op(
        [ca, cb, co, m, k, p]() mutable {
          if (!co.has_grad()) return;
          const float* g = co.grad().data();
          if (ca.requires_grad()) {
            ca.ensure_grad();
            gemm(false, true, m, p, k, g, cb.values().data(), ca.grad().data(), true);
          }
          if (cb.requires_grad()) {
            cb.ensure_grad();
            gemm(true, false, k, m, p, ca.values().data(), g, cb.grad().data(), true);
          }
        },
        out);
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul_nt: rank-2 tensors required");
  require(a.dim(1) == b.dim(1), "matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), p = b.dim(0);
  Tensor out = Tensor::zeros({m, p});
  gemm(false, true, m, k, p, a.values().data(), b.values().data(), out.values().data(), false);
  bool tracked = tracking({&a, &b});
  out = finish(std::move(out), tracked, "matmul_nt");
  if (tracked) {
    Tensor ca = a, cb = b, co = out;
    record_op(
        [ca, cb, co, m, k, p]() mutable {
          if (!co.has_grad()) return;
          const float* g = co.grad().data();
          if (ca.requires_grad()) {
            ca.ensure_grad();
            gemm(false, false, m, p, k, g, cb.values().data(), ca.grad().data(), true);
          }
          if (cb.requires_grad()) {
            cb.ensure_grad();
            gemm(true, false, p, m, k, g, ca.values().data(), cb.grad().data(), true);
          }
        },
        out);
  }
  return out;
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, float (*fwd)(float, float),
                          void (*bwd)(float ga, float av, float bv, float* da, float* db)) {
  require(a.shape() == b.shape(),
          std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> data(av.size());
  for (size_t i = 0; i < av.size(); ++i) data[i] = fwd(av[i], bv[i]);
  Tensor out = Tensor::from_data(a.shape(), std::move(data));
  bool tracked = tracking({&a, &b});
  out = finish(std::move(out), tracked, name);
  if (tracked) {
    Tensor ca = a, cb = b, co = out;
    record_op(
        [ca, cb, co, bwd]() mutable {
          if (!co.has_grad()) return;
          auto g = co.grad();
          auto av = ca.values();
          auto bv = cb.values();
          const bool wa = ca.requires_grad(), wb = cb.requires_grad();
          if (wa) ca.ensure_grad();
          if (wb) cb.ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) {
            float da = 0, db = 0;
            bwd(g[i], av[i], bv[i], &da, &db);
            if (wa) ca.grad()[i] += da;
            if (wb) cb.grad()[i] += db;
          }
        },
        out);
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float g, float, float, float* da, float* db) {
        *da = g;
        *db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float g, float, float, float* da, float* db) {
        *da = g;
        *db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float g, float av, float bv, float* da, float* db) {
        *da = g * bv;
        *db = g * av;
      });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require(a.rank() == 2 && bias.rank() == 1, "add_row: need [r,c] and [c]");
  require(a.dim(1) == bias.dim(0), "add_row: column count mismatch");
  const int r = a.dim(0), c = a.dim(1);
  auto av = a.values();
  auto bv = bias.values();
  std::vector<float> data(av.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      data[static_cast<size_t>(i) * c + j] = av[static_cast<size_t>(i) * c + j] + bv[j];
  Tensor out = Tensor::from_data(a.shape(), std::move(data));
  bool tracked = tracking({&a, &bias});
  out = finish(std::move(out), tracked, "add_row");
  if (tracked) {
    Tensor ca = a, cb = bias, co = out;
    record_op(
        [ca, cb, co, r, c]() mutable {
          if (!co.has_grad()) return;
          auto g = co.grad();
          if (ca.requires_grad()) axpy_grad(ca, g);
          if (cb.requires_grad()) {
            cb.ensure_grad();
            auto bg = cb.grad();
            for (int j = 0; j < c; ++j) {
              double acc = 0.0;
              for (int i = 0; i < r; ++i) acc += g[static_cast<size_t>(i) * c + j];
              bg[j] += static_cast<float>(acc);
            }
          }
        },
        out);
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  auto av = a.values();
  std::vector<float> data(av.size());
  for (size_t i = 0; i < av.size(); ++i) data[i] = av[i] * s;
  Tensor out = Tensor::from_data(a.shape(), std::move(data));
  bool tracked = tracking({&a});
  out = finish(std::move(out), tracked, "scale");
  if (tracked) {
    Tensor ca = a, co = out;
    record_op(
        [ca, co, s]() mutable {
          if (!co.has_grad() || !ca.requires_grad()) return;
          ca.ensure_grad();
          auto g = co.grad();
          auto ag = ca.grad();
          for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * s;
        },
        out);
  }
  return out;
}

Tensor masked_softmax(const Tensor& scores, const AttnMask& mask) {
  require(scores.rank() == 2, "masked_softmax: rank-2 tensor required");
  const int r = scores.dim(0), c = scores.dim(1);
  require(mask.rows == r && mask.cols == c, "masked_softmax: mask shape mismatch");
  auto sv = scores.values();
  std::vector<float> probs(sv.size(), 0.0f);
  for (int i = 0; i < r; ++i) {
    // max and sum run over allowed entries only; blocked entries stay 0.
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j)) mx = std::max(mx, sv[static_cast<size_t>(i) * c + j]);
    if (!std::isfinite(mx))
      throw ValidationError("masked_softmax: fully blocked row " + std::to_string(i));
    double denom = 0.0;
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j)) denom += std::exp(static_cast<double>(sv[static_cast<size_t>(i) * c + j] - mx));
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j))
        probs[static_cast<size_t>(i) * c + j] =
            static_cast<float>(std::exp(static_cast<double>(sv[static_cast<size_t>(i) * c + j] - mx)) / denom);
  }
  Tensor out = Tensor::from_data(scores.shape(), std::move(probs));
  bool tracked = tracking({&scores});
  out = finish(std::move(out), tracked, "masked_softmax");
  if (tracked) {
    Tensor cs = scores, co = out;
    record_op(
        [cs, co, r, c]() mutable {
          if (!co.has_grad() || !cs.requires_grad()) return;
          cs.ensure_grad();
          auto g = co.grad();
          auto p = co.values();
          auto sg = cs.grad();
          for (int i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j)
              dot += static_cast<double>(p[static_cast<size_t>(i) * c + j]) * g[static_cast<size_t>(i) * c + j];
            for (int j = 0; j < c; ++j) {
              const size_t idx = static_cast<size_t>(i) * c + j;
              sg[idx] += p[idx] * (g[idx] - static_cast<float>(dot));
            }
          }
        },
        out);
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require(x.rank() == 2 && gain.rank() == 1 && bias.rank() == 1, "layer_norm: need [r,c], [c], [c]");
  const int r = x.dim(0), c = x.dim(1);
  require(gain.dim(0) == c && bias.dim(0) == c, "layer_norm: gain/bias length mismatch");
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<float> data(xv.size());
  std::vector<double> mu(r), inv(r);
  for (int i = 0; i < r; ++i) {
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += xv[static_cast<size_t>(i) * c + j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = xv[static_cast<size_t>(i) * c + j] - m;
      var += d * d;
    }
    var /= c;
    mu[i] = m;
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      const size_t idx = static_cast<size_t>(i) * c + j;
      data[idx] = static_cast<float>((xv[idx] - m) * inv[i]) * gv[j] + bv[j];
    }
  }
  Tensor out = Tensor::from_data(x.shape(), std::move(data));
  bool tracked = tracking({&x, &gain, &bias});
  out = finish(std::move(out), tracked, "layer_norm");
  if (tracked) {
    Tensor cx = x, cg = gain, cb = bias, co = out;
    record_op(
        [cx, cg, cb, co, r, c, mu = std::move(mu), inv = std::move(inv)]() mutable {
          if (!co.has_grad()) return;
          auto g = co.grad();
          auto xv = cx.values();
          auto gv = cg.values();
          const bool wx = cx.requires_grad(), wg = cg.requires_grad(), wb = cb.requires_grad();
          if (wx) cx.ensure_grad();
          if (wg) cg.ensure_grad();
          if (wb) cb.ensure_grad();
          for (int i = 0; i < r; ++i) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            std::vector<double> xhat(c), dxhat(c);
            for (int j = 0; j < c; ++j) {
              const size_t idx = static_cast<size_t>(i) * c + j;
              xhat[j] = (xv[idx] - mu[i]) * inv[i];
              dxhat[j] = static_cast<double>(g[idx]) * gv[j];
              mean_dxhat += dxhat[j];
              mean_dxhat_xhat += dxhat[j] * xhat[j];
            }
            mean_dxhat /= c;
            mean_dxhat_xhat /= c;
            for (int j = 0; j < c; ++j) {
              const size_t idx = static_cast<size_t>(i) * c + j;
              if (wx)
                cx.grad()[idx] +=
                    static_cast<float>(inv[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
              if (wg) cg.grad()[j] += static_cast<float>(static_cast<double>(g[idx]) * xhat[j]);
              if (wb) cb.grad()[j] += g[idx];
            }
          }
        },
        out);
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  auto xv = x.values();
  std::vector<float> data(xv.size());
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < xv.size(); ++i) {
    double v = xv[i];
    data[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  Tensor out = Tensor::from_data(x.shape(), std::move(data));
  bool tracked = tracking({&x});
  out = finish(std::move(out), tracked, "gelu");
  if (tracked) {
    Tensor cx = x, co = out;
    record_op(
        [cx, co]() mutable {
          if (!co.has_grad() || !cx.requires_grad()) return;
          cx.ensure_grad();
          auto g = co.grad();
          auto xv = cx.values();
          auto xg = cx.grad();
          constexpr double kInvSqrt2 = 0.7071067811865475244;
          constexpr double kInvSqrt2Pi = 0.3989422804014326779;
          for (size_t i = 0; i < g.size(); ++i) {
            double v = xv[i];
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            xg[i] += static_cast<float>(g[i] * (cdf + v * pdf));
          }
        },
        out);
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require(table.rank() == 2, "gather_rows: table must be rank 2");
  const int rows = table.dim(0), c = table.dim(1);
  for (int id : ids)
    require(id >= 0 && id < rows, "gather_rows: row id " + std::to_string(id) + " out of range");
  const int t = static_cast<int>(ids.size());
  std::vector<float> data(static_cast<size_t>(t) * c);
  auto tv = table.values();
  for (int i = 0; i < t; ++i)
    std::memcpy(data.data() + static_cast<size_t>(i) * c, tv.data() + static_cast<size_t>(ids[i]) * c,
                sizeof(float) * c);
  Tensor out = Tensor::from_data({t, c}, std::move(data));
  bool tracked = tracking({&table});
  out = finish(std::move(out), tracked, "gather_rows");
  if (tracked) {
    Tensor ct = table, co = out;
    record_op(
        [ct, co, ids, c]() mutable {
          if (!co.has_grad() || !ct.requires_grad()) return;
          ct.ensure_grad();
          auto g = co.grad();
          auto tg = ct.grad();
          for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < c; ++j)
              tg[static_cast<size_t>(ids[i]) * c + j] += g[i * static_cast<size_t>(c) + j];
        },
        out);
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
  require(x.rank() == 2, "slice_rows: rank-2 tensor required");
  require(0 <= begin && begin <= end && end <= x.dim(0), "slice_rows: range out of bounds");
  const int c = x.dim(1), n = end - begin;
  auto xv = x.values();
  std::vector<float> data(xv.begin() + static_cast<size_t>(begin) * c,
                          xv.begin() + static_cast<size_t>(end) * c);
  Tensor out = Tensor::from_data({n, c}, std::move(data));
  bool tracked = tracking({&x});
  out = finish(std::move(out), tracked, "slice_rows");
  if (tracked) {
    Tensor cx = x, co = out;
    record_op(
        [cx, co, begin, c, n]() mutable {
          if (!co.has_grad() || !cx.requires_grad()) return;
          cx.ensure_grad();
          auto g = co.grad();
          auto xg = cx.grad();
          for (size_t i = 0; i < static_cast<size_t>(n) * c; ++i)
            xg[static_cast<size_t>(begin) * c + i] += g[i];
        },
        out);
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
  require(x.rank() == 2, "slice_cols: rank-2 tensor required");
  require(0 <= begin && begin <= end && end <= x.dim(1), "slice_cols: range out of bounds");
  const int r = x.dim(0), c = x.dim(1), n = end - begin;
  auto xv = x.values();
  std::vector<float> data(static_cast<size_t>(r) * n);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j)
      data[static_cast<size_t>(i) * n + j] = xv[static_cast<size_t>(i) * c + begin + j];
  Tensor out = Tensor::from_data({r, n}, std::move(data));
  bool tracked = tracking({&x});
  out = finish(std::move(out), tracked, "slice_cols");
  if (tracked) {
    Tensor cx = x, co = out;
    record_op(
        [cx, co, begin, r, c, n]() mutable {
          if (!co.has_grad() || !cx.requires_grad()) return;
          cx.ensure_grad();
          auto g = co.grad();
          auto xg = cx.grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < n; ++j)
              xg[static_cast<size_t>(i) * c + begin + j] += g[static_cast<size_t>(i) * n + j];
        },
        out);
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  const int c = parts[0].dim(1);
  int total = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(1) == c, "concat_rows: column count mismatch");
    total += p.dim(0);
  }
  std::vector<float> data;
  data.reserve(static_cast<size_t>(total) * c);
  for (const auto& p : parts) {
    auto pv = p.values();
    data.insert(data.end(), pv.begin(), pv.end());
  }
  Tensor out = Tensor::from_data({total, c}, std::move(data));
  bool tracked = false;
  for (const auto& p : parts)
    if (tracking({&p})) tracked = true;
  out = finish(std::move(out), tracked, "concat_rows");
  if (tracked) {
    std::vector<Tensor> cp = parts;
    Tensor co = out;
    record_op(
        [cp, co, c]() mutable {
          if (!co.has_grad()) return;
          auto g = co.grad();
          size_t offset = 0;
          for (auto& p : cp) {
            const size_t n = static_cast<size_t>(p.dim(0)) * c;
            if (p.requires_grad()) {
              p.ensure_grad();
              auto pg = p.grad();
              for (size_t i = 0; i < n; ++i) pg[i] += g[offset + i];
            }
            offset += n;
          }
        },
        out);
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  const int r = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(0) == r, "concat_cols: row count mismatch");
    total += p.dim(1);
  }
  std::vector<float> data(static_cast<size_t>(r) * total);
  int col = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    auto pv = p.values();
    for (int i = 0; i < r; ++i)
      std::memcpy(data.data() + static_cast<size_t>(i) * total + col,
                  pv.data() + static_cast<size_t>(i) * pc, sizeof(float) * pc);
    col += pc;
  }
  Tensor out = Tensor::from_data({r, total}, std::move(data));
  bool tracked = false;
  for (const auto& p : parts)
    if (tracking({&p})) tracked = true;
  out = finish(std::move(out), tracked, "concat_cols");
  if (tracked) {
    std::vector<Tensor> cp = parts;
    Tensor co = out;
    record_op(
        [cp, co, r, total]() mutable {
          if (!co.has_grad()) return;
          auto g = co.grad();
          int col = 0;
          for (auto& p : cp) {
            const int pc = p.dim(1);
            if (p.requires_grad()) {
              p.ensure_grad();
              auto pg = p.grad();
              for (int i = 0; i < r; ++i)
                for (int j = 0; j < pc; ++j)
                  pg[static_cast<size_t>(i) * pc + j] += g[static_cast<size_t>(i) * total + col + j];
            }
            col += pc;
          }
        },
        out);
  }
  return out;
}

Tensor replace_rows(const Tensor& x, const std::vector<int>& row_ids, const Tensor& rows) {
  require(x.rank() == 2 && rows.rank() == 2, "replace_rows: rank-2 tensors required");
  require(rows.dim(0) == static_cast<int>(row_ids.size()) && rows.dim(1) == x.dim(1),
          "replace_rows: fill shape mismatch, expected [" + std::to_string(row_ids.size()) + "," +
              std::to_string(x.dim(1)) + "]");
  const int c = x.dim(1);
  std::vector<uint8_t> replaced(static_cast<size_t>(x.dim(0)), 0);
  for (int id : row_ids) {
    require(id >= 0 && id < x.dim(0), "replace_rows: row id out of range");
    require(!replaced[static_cast<size_t>(id)], "replace_rows: duplicate row id");
    replaced[static_cast<size_t>(id)] = 1;
  }
  auto xv = x.values();
  std::vector<float> data(xv.begin(), xv.end());
  auto rv = rows.values();
  for (size_t i = 0; i < row_ids.size(); ++i)
    std::memcpy(data.data() + static_cast<size_t>(row_ids[i]) * c, rv.data() + i * c, sizeof(float) * c);
  Tensor out = Tensor::from_data(x.shape(), std::move(data));
  bool tracked = tracking({&x, &rows});
  out = finish(std::move(out), tracked, "replace_rows");
  if (tracked) {
    Tensor cx = x, cr = rows, co = out;
    record_op(
        [cx, cr, co, row_ids, replaced = std::move(replaced), c]() mutable {
          if (!co.has_grad()) return;
          auto g = co.grad();
          if (cx.requires_grad()) {
            cx.ensure_grad();
            auto xg = cx.grad();
            for (int i = 0; i < cx.dim(0); ++i)
              if (!replaced[static_cast<size_t>(i)])
                for (int j = 0; j < c; ++j)
                  xg[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(i) * c + j];
          }
          if (cr.requires_grad()) {
            cr.ensure_grad();
            auto rg = cr.grad();
            for (size_t i = 0; i < row_ids.size(); ++i)
              for (int j = 0; j < c; ++j)
                rg[i * static_cast<size_t>(c) + j] += g[static_cast<size_t>(row_ids[i]) * c + j];
          }
        },
        out);
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& loss_positions) {
  require(logits.rank() == 2, "cross_entropy: logits must be rank 2");
  const int p = logits.dim(0), vocab = logits.dim(1);
  require(static_cast<int>(targets.size()) == p, "cross_entropy: targets length mismatch");
  require(static_cast<int>(loss_positions.size()) == p, "cross_entropy: loss_positions length mismatch");
  std::vector<int> active;
  for (int i = 0; i < p; ++i)
    if (loss_positions[static_cast<size_t>(i)]) {
      require(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < vocab,
              "cross_entropy: target undefined at loss position " + std::to_string(i));
      active.push_back(i);
    }
  if (active.empty()) throw ValidationError("cross_entropy: zero loss positions");
  auto lv = logits.values();
  // per-position softmax cached for the adjoint
  std::vector<float> probs(active.size() * static_cast<size_t>(vocab));
  double total = 0.0;
  for (size_t a = 0; a < active.size(); ++a) {
    const float* row = lv.data() + static_cast<size_t>(active[a]) * vocab;
    float mx = row[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double lse = mx + std::log(denom);
    total += lse - row[targets[static_cast<size_t>(active[a])]];
    for (int j = 0; j < vocab; ++j)
      probs[a * static_cast<size_t>(vocab) + j] =
          static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / denom);
  }
  const float n_loss = static_cast<float>(active.size());
  Tensor out = Tensor::scalar(static_cast<float>(total / n_loss));
  bool tracked = tracking({&logits});
  out = finish(std::move(out), tracked, "cross_entropy");
  if (tracked) {
    Tensor cl = logits, co = out;
    record_op(
        [cl, co, active = std::move(active), probs = std::move(probs), targets, vocab, n_loss]() mutable {
          if (!co.has_grad() || !cl.requires_grad()) return;
          cl.ensure_grad();
          const float g = co.grad()[0] / n_loss;
          auto lg = cl.grad();
          for (size_t a = 0; a < active.size(); ++a) {
            const int pos = active[a];
            for (int j = 0; j < vocab; ++j)
              lg[static_cast<size_t>(pos) * vocab + j] += g * probs[a * static_cast<size_t>(vocab) + j];
            lg[static_cast<size_t>(pos) * vocab + targets[static_cast<size_t>(pos)]] -= g;
          }
        },
        out);
  }
  return out;
}

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean, const char* name) {
  auto xv = x.values();
  double acc = 0.0;
  for (float v : xv) acc += v;
  const float denom = take_mean ? static_cast<float>(xv.size()) : 1.0f;
  Tensor out = Tensor::scalar(static_cast<float>(acc) / denom);
  bool tracked = tracking({&x});
  out = finish(std::move(out), tracked, name);
  if (tracked) {
    Tensor cx = x, co = out;
    record_op(
        [cx, co, denom]() mutable {
          if (!co.has_grad() || !cx.requires_grad()) return;
          cx.ensure_grad();
          const float g = co.grad()[0] / denom;
          auto xg = cx.grad();
          for (size_t i = 0; i < xg.size(); ++i) xg[i] += g;
        },
        out);
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false, "sum"); }
Tensor mean(const Tensor& x) { return reduce_all(x, true, "mean"); }

Tensor detach(const Tensor& x) {
  auto xv = x.values();
  return Tensor::from_data(x.shape(), std::vector<float>(xv.begin(), xv.end()), false);
}

}  // namespace semrec
