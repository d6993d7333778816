#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sublaplace/linalg.hpp"

namespace sublaplace {

enum class Activation { ReLU, Identity };

struct LayerSpec {
  Index in_dim = 1;
  Index out_dim = 1;
  Activation activation = Activation::Identity;

  Index num_params() const { return in_dim * out_dim + out_dim; }
  bool operator==(const LayerSpec&) const = default;
};

// Where a flattened parameter lives. `col` is -1 for a bias entry.
struct ParamLocation {
  std::size_t layer = 0;
  Index row = 0;
  Index col = -1;
};

// Per-layer activations recorded by a batched forward pass together with the
// derivative of the scalar output with respect to every pre-activation.
// inputs[l] is the n x in_dim input of layer l; output_grads[l] is n x out_dim.
struct BatchTape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> output_grads;
  Vector outputs;
};

// Dense feed-forward network with a scalar head.
//
// Flattened layout (frozen): layers first to last; inside a layer the weight
// matrix in row-major order (output-neuron-major), followed by the biases.
class Mlp {
 public:
  Mlp(std::vector<LayerSpec> layers, Vector theta, std::uint64_t seed = 0);

  // widths = {input_dim, hidden..., 1}. Hidden layers use ReLU, the head is
  // Identity. Weights ~ U(-sqrt(6/(in+out)), +sqrt(6/(in+out))), biases 0.
  static Mlp initialize(std::span<const Index> widths, std::uint64_t seed);
  static Mlp initialize(std::initializer_list<Index> widths, std::uint64_t seed) {
    std::vector<Index> w(widths);
    return initialize(std::span<const Index>(w), seed);
  }

  static Index count_params(std::span<const Index> widths);

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const Vector& theta() const noexcept { return theta_; }
  Index num_params() const noexcept { return theta_.size(); }
  Index input_dim() const noexcept { return layers_.front().in_dim; }
  std::uint64_t seed() const noexcept { return seed_; }

  Mlp with_theta(Vector theta) const { return Mlp(layers_, std::move(theta), seed_); }

  Index layer_offset(std::size_t l) const { return offsets_[l]; }
  Index bias_offset(std::size_t l) const { return offsets_[l] + layers_[l].in_dim * layers_[l].out_dim; }
  ParamLocation locate(Index param) const;

  double forward(const Eigen::Ref<const Vector>& x) const;

  // Reverse-mode gradient of the output with respect to theta. Writes into
  // `grad` (length p) and returns the output value.
  double param_gradient(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> grad) const;
  Vector param_gradient(const Eigen::Ref<const Vector>& x) const;

  // X is n x input_dim, one sample per row.
  Vector forward_batch(const Matrix& x) const;
  BatchTape tape(const Matrix& x) const;

  // Gradient of sum_n weights[n] * f(x_n) with respect to theta, plus the
  // batch outputs. Used by the trainers with weights = dLoss/df / batch size.
  Vector weighted_gradient(const Matrix& x, const std::function<Vector(const Vector&)>& output_weights,
                           Vector* outputs = nullptr) const;

 private:
  void check_input(Index dim) const;
  Eigen::Map<const RowMatrix> weights(std::size_t l) const;
  Eigen::Map<const Vector> bias(std::size_t l) const;
  // Fills inputs/preacts and returns the outputs.
  Vector run_forward(const Matrix& x, std::vector<Matrix>& inputs, std::vector<Matrix>& preacts) const;
  // Back-propagates `head` (n x 1, d/df) and returns d/dz for every layer.
  std::vector<Matrix> run_backward(const std::vector<Matrix>& preacts, Matrix head) const;

  std::vector<LayerSpec> layers_;
  Vector theta_;
  std::vector<Index> offsets_;
  std::uint64_t seed_ = 0;
};

// Per-sample gradient matrix, one row per sample of `x` (n x p).
RowMatrix jacobian(const Mlp& model, const Matrix& x);

// Selected columns of the per-sample gradient matrix (n x |cols|), without
// forming the full matrix.
Matrix jacobian_columns(const Mlp& model, const Matrix& x, std::span<const Index> cols);
Matrix jacobian_columns(const Mlp& model, const BatchTape& tape, std::span<const Index> cols);

// Componentwise mean of squared per-sample gradients over the rows of `x`.
Vector mean_squared_gradient(const Mlp& model, const Matrix& x);
Vector mean_squared_gradient(const Mlp& model, const BatchTape& tape);

// Checkpoints: text header plus hex-float parameters, lossless.
std::string serialize_model(const Mlp& model);
Mlp deserialize_model(const std::string& text);
void save_model(const Mlp& model, const std::filesystem::path& path);
Mlp load_model(const std::filesystem::path& path);

}  // namespace sublaplace
