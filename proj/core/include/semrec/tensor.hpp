#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "semrec/error.hpp"

namespace semrec {

namespace detail {
struct TensorStorage {
  std::vector<int> shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float32 tensor. Copying a Tensor copies the handle, not the
// buffer; two handles to the same storage see each other's writes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> values,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  // N(0, stddev^2) entries drawn in row-major order.
  static Tensor randn(std::vector<int> shape, float stddev, std::mt19937& rng,
                      bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  int64_t numel() const;

  std::span<float> values();
  std::span<const float> values() const;
  float at(int i) const;
  float at(int i, int j) const;
  float item() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<float> grad();
  std::span<const float> grad() const;
  void ensure_grad();  // allocate a zero grad buffer if absent
  void zero_grad();
  void drop_grad();

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
  const void* id() const { return storage_.get(); }

 private:
  std::shared_ptr<detail::TensorStorage> storage_;
  detail::TensorStorage& st();
  const detail::TensorStorage& st() const;
};

// Boolean attention mask, rows = queries, cols = keys; true means "may attend".
struct AttnMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allow;

  AttnMask() = default;
  AttnMask(int r, int c, bool init = false)
      : rows(r), cols(c), allow(static_cast<size_t>(r) * c, init ? 1 : 0) {}

  static AttnMask causal(int n);

  bool at(int r, int c) const { return allow[static_cast<size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { allow[static_cast<size_t>(r) * cols + c] = v ? 1 : 0; }
  // Top-left square sub-mask covering the first n positions.
  AttnMask prefix(int n) const;
};

// Records executed ops so backward() can replay their adjoint rules in
// reverse. Exactly one tape may be active per thread; ops executed while no
// tape is active run forward-only (the concurrent-inference path).
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and walks the recorded ops in reverse order.
  // Throws if loss is not a taped scalar or if called twice without reset().
  void backward(const Tensor& loss);
  void reset();
  size_t size() const { return ops_.size(); }

  static Tape* active();

  struct Recorded {
    std::function<void()> adjoint;
    const void* output_id = nullptr;
  };
  void record(Recorded op) { ops_.push_back(std::move(op)); }

 private:
  std::vector<Recorded> ops_;
  bool consumed_ = false;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// ---- op set -------------------------------------------------------------
// Forward results are float32; every reduction accumulates in float64.
// Each op validates shapes and checks its output for NaN/Inf.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]·[k,p]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]·[p,k]^T
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor add_row(const Tensor& a, const Tensor& bias);  // [r,c] + [c] per row
Tensor scale(const Tensor& a, float s);

// Row-wise softmax with hard masking: blocked entries get probability
// exactly 0 and never enter the max/sum reductions. A fully blocked row is
// an error.
Tensor masked_softmax(const Tensor& scores, const AttnMask& mask);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);
Tensor gelu(const Tensor& x);

// out[t,:] = table[ids[t],:]
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor slice_cols(const Tensor& x, int begin, int end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Copy of x with rows[i] written at row_ids[i]; gradient splits between the
// kept rows of x and the inserted rows.
Tensor replace_rows(const Tensor& x, const std::vector<int>& row_ids, const Tensor& rows);

// Mean negative log-likelihood over positions with loss_positions[p] set;
// targets[p] is the token id expected at such positions. Zero loss positions
// is an error.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& loss_positions);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Forward copy that blocks gradient flow.
Tensor detach(const Tensor& x);

void check_finite(std::span<const float> data, const char* op_name);

}  // namespace semrec
