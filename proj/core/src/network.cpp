#include "eqsep/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "binary_io.hpp"
#include "eqsep/dataset.hpp"
#include "eqsep/errors.hpp"
#include "eqsep/rng.hpp"

namespace eqsep {

void NetworkSpec::validate() const {
  if (input_dim < 1) throw DimensionError("network input dimension must be >= 1");
  if (hidden_widths.empty()) throw DimensionError("network needs at least one hidden block");
  for (std::size_t w : hidden_widths) {
    if (w < 1) throw DimensionError("hidden widths must be >= 1");
  }
  if (num_classes < 2) throw DimensionError("network needs at least 2 classes");
}

// ---------------------------------------------------------------------------
// Parameter views

std::size_t Network::parameter_count() const {
  std::size_t count = 0;
  for (auto p : parameters()) count += p.size();
  return count;
}

std::vector<std::span<double>> Network::parameters() {
  std::vector<std::span<double>> out;
  for (auto& b : blocks) {
    out.emplace_back(b.weight.values());
    out.emplace_back(b.bias);
    if (spec.batchnorm) {
      out.emplace_back(b.gamma);
      out.emplace_back(b.beta);
    }
  }
  out.emplace_back(classifier_weight.values());
  out.emplace_back(classifier_bias);
  return out;
}

std::vector<std::span<const double>> Network::parameters() const {
  std::vector<std::span<const double>> out;
  for (auto p : const_cast<Network*>(this)->parameters()) out.emplace_back(p);
  return out;
}

std::vector<std::size_t> Network::parameter_layers() const {
  std::vector<std::size_t> out;
  const std::size_t per_block = spec.batchnorm ? 4 : 2;
  for (std::size_t l = 0; l < blocks.size(); ++l) out.insert(out.end(), per_block, l);
  out.insert(out.end(), 2, blocks.size());
  return out;
}

bool Network::all_finite() const {
  auto finite = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  for (auto p : parameters()) {
    if (!finite(p)) return false;
  }
  for (const auto& b : blocks) {
    if (!finite(b.running_mean) || !finite(b.running_var)) return false;
  }
  return true;
}

Network init_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Xoshiro256ss rng(seed);
  auto he_normal = [&](std::size_t out, std::size_t in) {
    Matrix w(out, in);
    const double sd = std::sqrt(2.0 / double(in));
    for (double& v : w.values()) v = sd * rng.normal();
    return w;
  };

  Network net;
  net.spec = spec;
  std::size_t in = spec.input_dim;
  for (std::size_t width : spec.hidden_widths) {
    HiddenBlock b;
    b.weight = he_normal(width, in);
    b.bias.assign(width, 0.0);
    if (spec.batchnorm) {
      b.gamma.assign(width, 1.0);
      b.beta.assign(width, 0.0);
      b.running_mean.assign(width, 0.0);
      b.running_var.assign(width, 1.0);
    }
    net.blocks.push_back(std::move(b));
    in = width;
  }
  net.classifier_weight = he_normal(std::size_t(spec.num_classes), in);
  net.classifier_bias.assign(std::size_t(spec.num_classes), 0.0);
  return net;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

bool is_frozen(FrozenLayers frozen, std::size_t layer) {
  return !frozen.empty() && frozen[layer] != 0;
}

void check_frozen(const Network& net, FrozenLayers frozen) {
  if (!frozen.empty() && frozen.size() != net.blocks.size() + 1) {
    throw DimensionError("freeze mask has " + std::to_string(frozen.size()) + " entries, network has " +
                         std::to_string(net.blocks.size() + 1) + " layers");
  }
}

void add_row_vector(Matrix& m, std::span<const double> v) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += v[j];
  }
}

// `updatable` is non-null only for train-mode passes, which write running
// statistics back into the network.
ForwardResult forward_impl(const Network& net, Network* updatable, const Matrix& batch,
                           Mode mode, FrozenLayers frozen) {
  if (batch.cols() != net.spec.input_dim) {
    throw DimensionError("forward: batch has " + std::to_string(batch.cols()) +
                         " features, network expects " + std::to_string(net.spec.input_dim));
  }
  check_frozen(net, frozen);
  const std::size_t rows = batch.rows();
  const bool train = mode == Mode::kTrain;

  ForwardResult result;
  result.trace.layers.reserve(net.blocks.size() + 1);
  result.trace.layers.push_back(batch);

  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    const HiddenBlock& blk = net.blocks[l];
    Matrix z = matmul_nt(result.trace.layers.back(), blk.weight);
    add_row_vector(z, blk.bias);
    const std::size_t width = z.cols();

    if (net.spec.batchnorm) {
      BlockCache c;
      c.batch_statistics = train && !is_frozen(frozen, l);
      std::vector<double> mean(width, 0.0);
      c.inv_std.assign(width, 0.0);
      if (c.batch_statistics) {
        if (rows < 2) {
          throw DegenerateError("train-mode batch normalization needs a batch of at least 2");
        }
        std::vector<double> var(width, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
          const auto row = z.row(i);
          for (std::size_t j = 0; j < width; ++j) mean[j] += row[j];
        }
        for (double& m : mean) m /= double(rows);
        for (std::size_t i = 0; i < rows; ++i) {
          const auto row = z.row(i);
          for (std::size_t j = 0; j < width; ++j) {
            const double d = row[j] - mean[j];
            var[j] += d * d;
          }
        }
        for (double& v : var) v /= double(rows);
        for (std::size_t j = 0; j < width; ++j) c.inv_std[j] = 1.0 / std::sqrt(var[j] + kBatchNormEpsilon);
        if (updatable != nullptr) {
          HiddenBlock& mb = updatable->blocks[l];
          const double unbias = double(rows) / double(rows - 1);
          for (std::size_t j = 0; j < width; ++j) {
            mb.running_mean[j] = (1.0 - kBatchNormMomentum) * mb.running_mean[j] + kBatchNormMomentum * mean[j];
            mb.running_var[j] = (1.0 - kBatchNormMomentum) * mb.running_var[j] +
                                kBatchNormMomentum * var[j] * unbias;
          }
        }
      } else {
        mean = blk.running_mean;
        for (std::size_t j = 0; j < width; ++j) {
          c.inv_std[j] = 1.0 / std::sqrt(blk.running_var[j] + kBatchNormEpsilon);
        }
      }

      c.normalized = Matrix(rows, width);
      for (std::size_t i = 0; i < rows; ++i) {
        auto zr = z.row(i);
        auto xr = c.normalized.row(i);
        for (std::size_t j = 0; j < width; ++j) {
          xr[j] = (zr[j] - mean[j]) * c.inv_std[j];
          zr[j] = std::max(0.0, blk.gamma[j] * xr[j] + blk.beta[j]);
        }
      }
      if (train) result.cache.push_back(std::move(c));
    } else {
      for (double& v : z.values()) v = std::max(0.0, v);
    }
    result.trace.layers.push_back(std::move(z));
  }

  result.logits = matmul_nt(result.trace.layers.back(), net.classifier_weight);
  add_row_vector(result.logits, net.classifier_bias);
  return result;
}

}  // namespace

ForwardResult forward(Network& net, const Matrix& batch, Mode mode, FrozenLayers frozen) {
  return forward_impl(net, mode == Mode::kTrain ? &net : nullptr, batch, mode, frozen);
}

ForwardResult forward(const Network& net, const Matrix& batch) {
  return forward_impl(net, nullptr, batch, Mode::kEval, {});
}

// ---------------------------------------------------------------------------
// Loss and backpropagation

namespace {

struct SoftmaxStats {
  double loss = 0.0;
  std::size_t correct = 0;
};

// Fills `dlogits` with (softmax - onehot) / rows when non-null.
SoftmaxStats softmax_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                   Matrix* dlogits) {
  const std::size_t rows = logits.rows();
  const std::size_t k = logits.cols();
  if (labels.size() != rows) throw DimensionError("label count does not match batch size");
  SoftmaxStats s;
  std::vector<double> p(k);
  for (std::size_t i = 0; i < rows; ++i) {
    const int y = labels[i];
    if (y < 0 || std::size_t(y) >= k) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
    const auto z = logits.row(i);
    const auto max_it = std::max_element(z.begin(), z.end());
    const double zmax = *max_it;
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - zmax);
      sum += p[j];
    }
    s.loss += std::log(sum) + zmax - z[std::size_t(y)];
    if (std::size_t(max_it - z.begin()) == std::size_t(y)) ++s.correct;
    if (dlogits != nullptr) {
      auto d = dlogits->row(i);
      for (std::size_t j = 0; j < k; ++j) d[j] = (p[j] / sum - (j == std::size_t(y) ? 1.0 : 0.0)) / double(rows);
    }
  }
  s.loss /= double(rows);
  return s;
}

std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> s(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    for (std::size_t j = 0; j < s.size(); ++j) s[j] += row[j];
  }
  return s;
}

}  // namespace

LossAndGrads loss_and_grads(const Network& net, const ForwardResult& fwd,
                            std::span<const int> labels, FrozenLayers frozen) {
  check_frozen(net, frozen);
  const std::size_t nb = net.blocks.size();
  if (fwd.trace.layers.size() != nb + 1) throw DimensionError("forward trace does not match network");
  if (net.spec.batchnorm && fwd.cache.size() != nb) {
    throw DimensionError("loss_and_grads needs the cache of a train-mode forward pass");
  }
  const std::size_t rows = fwd.logits.rows();

  LossAndGrads out;
  Matrix dlogits(rows, fwd.logits.cols());
  const SoftmaxStats s = softmax_cross_entropy(fwd.logits, labels, &dlogits);
  out.loss = s.loss;
  out.correct = s.correct;

  for (auto p : net.parameters()) out.grads.emplace_back(p.size(), 0.0);
  const std::size_t per_block = net.spec.batchnorm ? 4 : 2;
  auto tensor = [&](std::size_t layer, std::size_t which) -> std::vector<double>& {
    return out.grads[layer * per_block + which];
  };

  if (!is_frozen(frozen, nb)) {
    const Matrix dw = matmul_tn(dlogits, fwd.trace.layers[nb]);
    std::copy(dw.values().begin(), dw.values().end(), out.grads[nb * per_block].begin());
    out.grads[nb * per_block + 1] = column_sums(dlogits);
  }

  std::size_t first_trainable = nb;
  for (std::size_t l = 0; l < nb; ++l) {
    if (!is_frozen(frozen, l)) {
      first_trainable = l;
      break;
    }
  }
  if (first_trainable == nb) return out;

  Matrix da = matmul(dlogits, net.classifier_weight);
  for (std::size_t l = nb; l-- > first_trainable;) {
    const HiddenBlock& blk = net.blocks[l];
    const Matrix& act = fwd.trace.layers[l + 1];
    const std::size_t width = act.cols();
    // dY: gradient before the ReLU.
    Matrix dz = std::move(da);
    for (std::size_t i = 0; i < dz.size(); ++i) {
      if (!(act.data()[i] > 0.0)) dz.data()[i] = 0.0;
    }

    if (net.spec.batchnorm) {
      const BlockCache& c = fwd.cache[l];
      if (!is_frozen(frozen, l)) {
        auto& dgamma = tensor(l, 2);
        auto& dbeta = tensor(l, 3);
        for (std::size_t i = 0; i < rows; ++i) {
          const auto dy = dz.row(i);
          const auto xh = c.normalized.row(i);
          for (std::size_t j = 0; j < width; ++j) {
            dgamma[j] += dy[j] * xh[j];
            dbeta[j] += dy[j];
          }
        }
      }
      // dY -> dx-hat
      for (std::size_t i = 0; i < rows; ++i) {
        auto r = dz.row(i);
        for (std::size_t j = 0; j < width; ++j) r[j] *= blk.gamma[j];
      }
      if (c.batch_statistics) {
        std::vector<double> sum_dx(width, 0.0), sum_dx_xh(width, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
          const auto dx = dz.row(i);
          const auto xh = c.normalized.row(i);
          for (std::size_t j = 0; j < width; ++j) {
            sum_dx[j] += dx[j];
            sum_dx_xh[j] += dx[j] * xh[j];
          }
        }
        const double inv_rows = 1.0 / double(rows);
        for (std::size_t i = 0; i < rows; ++i) {
          auto dx = dz.row(i);
          const auto xh = c.normalized.row(i);
          for (std::size_t j = 0; j < width; ++j) {
            dx[j] = c.inv_std[j] * (dx[j] - inv_rows * sum_dx[j] - xh[j] * inv_rows * sum_dx_xh[j]);
          }
        }
      } else {
        for (std::size_t i = 0; i < rows; ++i) {
          auto dx = dz.row(i);
          for (std::size_t j = 0; j < width; ++j) dx[j] *= c.inv_std[j];
        }
      }
    }

    if (!is_frozen(frozen, l)) {
      const Matrix dw = matmul_tn(dz, fwd.trace.layers[l]);
      std::copy(dw.values().begin(), dw.values().end(), tensor(l, 0).begin());
      tensor(l, 1) = column_sums(dz);
    }
    if (l > first_trainable) da = matmul(dz, blk.weight);
  }
  return out;
}

Evaluation evaluate(const Network& net, const Matrix& features, std::span<const int> labels,
                    std::size_t batch_size) {
  if (labels.size() != features.rows()) throw DimensionError("label count does not match rows");
  if (features.rows() == 0) return {};
  if (batch_size == 0) batch_size = features.rows();
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < features.rows(); begin += batch_size) {
    const std::size_t count = std::min(batch_size, features.rows() - begin);
    const ForwardResult fwd = forward(net, features.slice_rows(begin, count));
    const SoftmaxStats s = softmax_cross_entropy(fwd.logits, labels.subspan(begin, count), nullptr);
    loss += s.loss * double(count);
    correct += s.correct;
  }
  return {loss / double(features.rows()), double(correct) / double(features.rows())};
}

ForwardTrace probe_features(const Network& net, const Matrix& features, std::size_t batch_size) {
  if (features.cols() != net.spec.input_dim) {
    throw DimensionError("probe: features have " + std::to_string(features.cols()) +
                         " columns, network expects " + std::to_string(net.spec.input_dim));
  }
  const std::size_t n = features.rows();
  if (batch_size == 0) batch_size = std::max<std::size_t>(n, 1);
  ForwardTrace trace;
  trace.layers.push_back(features);
  for (std::size_t w : net.spec.hidden_widths) trace.layers.emplace_back(n, w);

  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t count = std::min(batch_size, n - begin);
    const ForwardResult fwd = forward(net, features.slice_rows(begin, count));
    for (std::size_t l = 1; l < fwd.trace.layers.size(); ++l) {
      const Matrix& part = fwd.trace.layers[l];
      std::copy(part.values().begin(), part.values().end(),
                trace.layers[l].data() + begin * part.cols());
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
  detail::ByteWriter w;
  w.bytes("EQNW", 4);
  w.u32(kCheckpointVersion);
  w.u32(std::uint32_t(net.spec.input_dim));
  w.u32(std::uint32_t(net.spec.num_classes));
  w.u32(net.spec.batchnorm ? 1u : 0u);
  w.u32(std::uint32_t(net.spec.hidden_widths.size()));
  for (std::size_t width : net.spec.hidden_widths) w.u32(std::uint32_t(width));
  for (const auto& b : net.blocks) {
    w.f64s(b.weight.values());
    w.f64s(b.bias);
    if (net.spec.batchnorm) {
      w.f64s(b.gamma);
      w.f64s(b.beta);
      w.f64s(b.running_mean);
      w.f64s(b.running_var);
    }
  }
  w.f64s(net.classifier_weight.values());
  w.f64s(net.classifier_bias);
  return w.take();
}

Network decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  const auto magic = r.bytes(4);
  if (std::string(magic.begin(), magic.end()) != "EQNW") throw FormatError("not an EQNW checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  NetworkSpec spec;
  spec.input_dim = r.u32();
  spec.num_classes = int(r.u32());
  const std::uint32_t bn = r.u32();
  if (bn > 1) throw FormatError("checkpoint batchnorm flag must be 0 or 1");
  spec.batchnorm = bn == 1;
  const std::uint32_t nb = r.u32();
  r.need(std::size_t(nb) * 4);
  for (std::uint32_t i = 0; i < nb; ++i) spec.hidden_widths.push_back(r.u32());
  spec.validate();

  std::size_t expected = 0;
  std::size_t in = spec.input_dim;
  for (std::size_t width : spec.hidden_widths) {
    expected += width * in + width * (spec.batchnorm ? 5 : 1);
    in = width;
  }
  expected += std::size_t(spec.num_classes) * (in + 1);
  if (r.remaining() != expected * 8) {
    throw LengthError("checkpoint payload has " + std::to_string(r.remaining()) + " bytes, spec implies " +
                      std::to_string(expected * 8));
  }

  Network net = init_network(spec, 0);
  for (auto& b : net.blocks) {
    r.f64s(b.weight.values());
    r.f64s(b.bias);
    if (spec.batchnorm) {
      r.f64s(b.gamma);
      r.f64s(b.beta);
      r.f64s(b.running_mean);
      r.f64s(b.running_var);
    }
  }
  r.f64s(net.classifier_weight.values());
  r.f64s(net.classifier_bias);
  if (r.remaining() != 0) throw LengthError("checkpoint has trailing bytes");
  if (!net.all_finite()) throw FormatError("checkpoint contains non-finite parameters");
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("short write on " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace eqsep
