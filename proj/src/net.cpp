#include "sublaplace/net.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sublaplace/error.hpp"
#include "sublaplace/rng.hpp"

namespace sublaplace {

namespace {

std::string dims(Index got, Index want) {
  return "expected input of length " + std::to_string(want) + ", got " + std::to_string(got);
}

}  // namespace

Mlp::Mlp(std::vector<LayerSpec> layers, Vector theta, std::uint64_t seed)
    : layers_(std::move(layers)), theta_(std::move(theta)), seed_(seed) {
  if (layers_.empty()) throw ShapeError("network needs at least one layer");
  Index total = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& s = layers_[l];
    if (s.in_dim < 1 || s.out_dim < 1) throw ShapeError("layer dimensions must be positive");
    if (l > 0 && s.in_dim != layers_[l - 1].out_dim)
      throw ShapeError("layer " + std::to_string(l) + " input does not match previous output");
    offsets_.push_back(total);
    total += s.num_params();
  }
  const LayerSpec& head = layers_.back();
  if (head.out_dim != 1 || head.activation != Activation::Identity)
    throw ShapeError("final layer must be an Identity layer with a scalar output");
  if (theta_.size() != total)
    throw ShapeError("theta has " + std::to_string(theta_.size()) + " entries, layers need " +
                     std::to_string(total));
}

Index Mlp::count_params(std::span<const Index> widths) {
  Index p = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) p += widths[i] * widths[i + 1] + widths[i + 1];
  return p;
}

Mlp Mlp::initialize(std::span<const Index> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ShapeError("need at least input and output widths");
  if (widths.back() != 1) throw ShapeError("network head must have width 1");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers.push_back({widths[i], widths[i + 1], last ? Activation::Identity : Activation::ReLU});
  }
  Vector theta = Vector::Zero(count_params(widths));
  Rng rng(derive_seed(seed, {0x1417}));
  Index off = 0;
  for (const LayerSpec& s : layers) {
    const double bound = std::sqrt(6.0 / static_cast<double>(s.in_dim + s.out_dim));
    for (Index j = 0; j < s.in_dim * s.out_dim; ++j) theta[off + j] = rng.uniform(-bound, bound);
    off += s.num_params();
  }
  return Mlp(std::move(layers), std::move(theta), seed);
}

ParamLocation Mlp::locate(Index param) const {
  if (param < 0 || param >= num_params()) throw ShapeError("parameter index out of range");
  auto it = std::upper_bound(offsets_.begin(), offsets_.end(), param);
  const std::size_t l = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  const LayerSpec& s = layers_[l];
  const Index local = param - offsets_[l];
  const Index nw = s.in_dim * s.out_dim;
  if (local >= nw) return {l, local - nw, -1};
  return {l, local / s.in_dim, local % s.in_dim};
}

void Mlp::check_input(Index dim) const {
  if (dim != input_dim()) throw ShapeError(dims(dim, input_dim()));
}

Eigen::Map<const RowMatrix> Mlp::weights(std::size_t l) const {
  const LayerSpec& s = layers_[l];
  return {theta_.data() + offsets_[l], s.out_dim, s.in_dim};
}

Eigen::Map<const Vector> Mlp::bias(std::size_t l) const {
  return {theta_.data() + bias_offset(l), layers_[l].out_dim};
}

double Mlp::forward(const Eigen::Ref<const Vector>& x) const {
  check_input(x.size());
  Vector h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Vector z = weights(l) * h + bias(l);
    if (layers_[l].activation == Activation::ReLU) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h[0];
}

double Mlp::param_gradient(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> grad) const {
  check_input(x.size());
  if (grad.size() != num_params()) throw ShapeError("gradient buffer has wrong length");
  const std::size_t depth = layers_.size();
  std::vector<Vector> inputs(depth);
  std::vector<Vector> preacts(depth);
  Vector h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    inputs[l] = h;
    preacts[l] = weights(l) * h + bias(l);
    h = layers_[l].activation == Activation::ReLU ? Vector(preacts[l].cwiseMax(0.0)) : preacts[l];
  }
  // d f / d z for the current layer; the head is Identity with one output.
  Vector dz = Vector::Ones(1);
  for (std::size_t l = depth; l-- > 0;) {
    const LayerSpec& s = layers_[l];
    Eigen::Map<RowMatrix>(grad.data() + offsets_[l], s.out_dim, s.in_dim).noalias() =
        dz * inputs[l].transpose();
    grad.segment(bias_offset(l), s.out_dim) = dz;
    if (l == 0) break;
    Vector dh = weights(l).transpose() * dz;
    if (layers_[l - 1].activation == Activation::ReLU)
      dh = (preacts[l - 1].array() > 0.0).select(dh, 0.0);
    dz = std::move(dh);
  }
  return h[0];
}

Vector Mlp::param_gradient(const Eigen::Ref<const Vector>& x) const {
  Vector g(num_params());
  param_gradient(x, g);
  return g;
}

Vector Mlp::run_forward(const Matrix& x, std::vector<Matrix>& inputs, std::vector<Matrix>& preacts) const {
  check_input(x.cols());
  const std::size_t depth = layers_.size();
  inputs.resize(depth);
  preacts.resize(depth);
  inputs[0] = x;
  for (std::size_t l = 0; l < depth; ++l) {
    Matrix z = inputs[l] * weights(l).transpose();
    z.rowwise() += bias(l).transpose();
    if (l + 1 < depth) {
      inputs[l + 1] = layers_[l].activation == Activation::ReLU ? Matrix(z.cwiseMax(0.0)) : z;
    }
    preacts[l] = std::move(z);
  }
  const Matrix& last = preacts.back();
  return last.col(0);
}

std::vector<Matrix> Mlp::run_backward(const std::vector<Matrix>& preacts, Matrix head) const {
  const std::size_t depth = layers_.size();
  std::vector<Matrix> grads(depth);
  grads[depth - 1] = std::move(head);
  for (std::size_t l = depth - 1; l > 0; --l) {
    Matrix dh = grads[l] * weights(l);
    if (layers_[l - 1].activation == Activation::ReLU)
      dh = (preacts[l - 1].array() > 0.0).select(dh, 0.0);
    grads[l - 1] = std::move(dh);
  }
  return grads;
}

Vector Mlp::forward_batch(const Matrix& x) const {
  std::vector<Matrix> inputs, preacts;
  return run_forward(x, inputs, preacts);
}

BatchTape Mlp::tape(const Matrix& x) const {
  BatchTape t;
  std::vector<Matrix> preacts;
  t.outputs = run_forward(x, t.inputs, preacts);
  t.output_grads = run_backward(preacts, Matrix::Ones(x.rows(), 1));
  return t;
}

Vector Mlp::weighted_gradient(const Matrix& x, const std::function<Vector(const Vector&)>& output_weights,
                              Vector* outputs) const {
  std::vector<Matrix> inputs, preacts;
  Vector out = run_forward(x, inputs, preacts);
  Vector w = output_weights(out);
  if (w.size() != x.rows()) throw ShapeError("output weights must have one entry per sample");
  std::vector<Matrix> dz = run_backward(preacts, Matrix(w));
  Vector grad(num_params());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& s = layers_[l];
    Eigen::Map<RowMatrix>(grad.data() + offsets_[l], s.out_dim, s.in_dim).noalias() =
        dz[l].transpose() * inputs[l];
    grad.segment(bias_offset(l), s.out_dim) = dz[l].colwise().sum().transpose();
  }
  if (outputs) *outputs = std::move(out);
  return grad;
}

RowMatrix jacobian(const Mlp& model, const Matrix& x) {
  const BatchTape t = model.tape(x);
  RowMatrix j(x.rows(), model.num_params());
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const LayerSpec& s = model.layers()[l];
    const Index woff = model.layer_offset(l);
    const Index boff = model.bias_offset(l);
    for (Index n = 0; n < x.rows(); ++n) {
      Eigen::Map<RowMatrix>(j.row(n).data() + woff, s.out_dim, s.in_dim).noalias() =
          t.output_grads[l].row(n).transpose() * t.inputs[l].row(n);
      j.row(n).segment(boff, s.out_dim) = t.output_grads[l].row(n);
    }
  }
  return j;
}

Matrix jacobian_columns(const Mlp& model, const BatchTape& tape, std::span<const Index> cols) {
  const Index n = tape.outputs.size();
  Matrix out(n, static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const ParamLocation loc = model.locate(cols[c]);
    if (loc.col < 0) {
      out.col(static_cast<Index>(c)) = tape.output_grads[loc.layer].col(loc.row);
    } else {
      out.col(static_cast<Index>(c)) =
          tape.output_grads[loc.layer].col(loc.row).cwiseProduct(tape.inputs[loc.layer].col(loc.col));
    }
  }
  return out;
}

Matrix jacobian_columns(const Mlp& model, const Matrix& x, std::span<const Index> cols) {
  return jacobian_columns(model, model.tape(x), cols);
}

Vector mean_squared_gradient(const Mlp& model, const BatchTape& tape) {
  const double n = static_cast<double>(tape.outputs.size());
  Vector out(model.num_params());
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const LayerSpec& s = model.layers()[l];
    const Matrix dz2 = tape.output_grads[l].array().square().matrix();
    const Matrix h2 = tape.inputs[l].array().square().matrix();
    Eigen::Map<RowMatrix>(out.data() + model.layer_offset(l), s.out_dim, s.in_dim).noalias() =
        (dz2.transpose() * h2) / n;
    out.segment(model.bias_offset(l), s.out_dim) = dz2.colwise().sum().transpose() / n;
  }
  return out;
}

Vector mean_squared_gradient(const Mlp& model, const Matrix& x) {
  if (x.rows() == 0) throw ShapeError("reference set is empty");
  return mean_squared_gradient(model, model.tape(x));
}

std::string serialize_model(const Mlp& model) {
  std::ostringstream os;
  os << "sublaplace-mlp 1\n";
  os << "seed " << model.seed() << "\n";
  os << "layers " << model.layers().size() << "\n";
  for (const LayerSpec& s : model.layers())
    os << s.in_dim << ' ' << s.out_dim << ' ' << (s.activation == Activation::ReLU ? "relu" : "identity")
       << "\n";
  os << "theta " << model.num_params() << "\n";
  char buf[64];
  for (Index i = 0; i < model.num_params(); ++i) {
    std::snprintf(buf, sizeof buf, "%a\n", model.theta()[i]);
    os << buf;
  }
  return os.str();
}

Mlp deserialize_model(const std::string& text) {
  std::istringstream is(text);
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "sublaplace-mlp" || version != 1)
    throw IngestError("not a sublaplace model checkpoint");
  std::uint64_t seed = 0;
  std::size_t nlayers = 0;
  if (!(is >> tag >> seed) || tag != "seed") throw IngestError("checkpoint: missing seed");
  if (!(is >> tag >> nlayers) || tag != "layers") throw IngestError("checkpoint: missing layers");
  std::vector<LayerSpec> layers;
  for (std::size_t l = 0; l < nlayers; ++l) {
    LayerSpec s;
    std::string act;
    if (!(is >> s.in_dim >> s.out_dim >> act)) throw IngestError("checkpoint: truncated layer table");
    if (act == "relu") {
      s.activation = Activation::ReLU;
    } else if (act == "identity") {
      s.activation = Activation::Identity;
    } else {
      throw IngestError("checkpoint: unknown activation '" + act + "'");
    }
    layers.push_back(s);
  }
  Index p = 0;
  if (!(is >> tag >> p) || tag != "theta") throw IngestError("checkpoint: missing theta");
  Vector theta(p);
  for (Index i = 0; i < p; ++i) {
    std::string tok;
    if (!(is >> tok)) throw IngestError("checkpoint: truncated theta");
    char* end = nullptr;
    theta[i] = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw IngestError("checkpoint: bad number '" + tok + "'");
  }
  return Mlp(std::move(layers), std::move(theta), seed);
}

void save_model(const Mlp& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write checkpoint " + path.string());
  out << serialize_model(model);
}

Mlp load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

}  // namespace sublaplace
