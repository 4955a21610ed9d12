#include "layertracer/autodiff.hpp"

#include <cmath>
#include <string>

#include "layertracer/error.hpp"

namespace layertracer::autodiff {

using numerics::matmul_accumulate;
using numerics::transpose;

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Tensor& value, bool trainable) {
  Node node;
  node.external = &value;
  node.requires_grad = recording_ && trainable;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Tensor value) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = recording_;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const {
  require(v.tape == this && v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(),
          ErrorCode::InvalidInput, "variable does not belong to this tape");
  return node_value(v.id);
}

Tensor Tape::gradient(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) {
    return Tensor(node_value(v.id).shape());
  }
  return node.grad;
}

Tensor& Tape::grad_accumulator(int id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) {
    node.grad = Tensor(node_value(id).shape());
  }
  return node.grad;
}

Var Tape::push(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  if (recording_) {
    for (const Var& p : parents) {
      needs = needs || nodes_[p.id].requires_grad;
    }
  }
  Node node;
  node.owned = std::move(value);
  node.requires_grad = needs;
  if (needs) {
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var loss) {
  require(loss.tape == this, ErrorCode::InvalidInput, "loss does not belong to this tape");
  require(node_value(loss.id).size() == 1, ErrorCode::InvalidInput,
          "backward requires a scalar loss");
  for (auto& node : nodes_) {
    node.grad = Tensor();
  }
  grad_accumulator(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.requires_grad && node.backward && !node.grad.empty()) {
      node.backward(*this, id);
    }
  }
}

std::vector<Tensor> grad(Var loss, std::span<const Var> parameters) {
  loss.tape->backward(loss);
  std::vector<Tensor> out;
  out.reserve(parameters.size());
  for (const Var& p : parameters) {
    out.push_back(loss.tape->gradient(p));
  }
  return out;
}

namespace {

void check_same_tape(Var a, Var b) {
  require(a.tape == b.tape && a.tape != nullptr, ErrorCode::InvalidInput,
          "operands recorded on different tapes");
}

void accumulate(Tape& tape, Var target, std::span<const double> g) {
  if (!tape.requires_grad(target.id)) {
    return;
  }
  auto acc = tape.grad_accumulator(target.id).data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    acc[i] += g[i];
  }
}

}  // namespace

Var add(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.same_shape(y), ErrorCode::InvalidInput, "add shape mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += y[i];
  }
  const Var parents[] = {a, b};
  return a.tape->push(std::move(out), parents, [a, b](Tape& tape, int self) {
    const Tensor g = tape.grad_of(self);
    accumulate(tape, a, g.data());
    accumulate(tape, b, g.data());
  });
}

Var add_row(Var a, Var bias) {
  check_same_tape(a, bias);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  require(x.rank() == 2 && b.size() == x.cols(), ErrorCode::InvalidInput, "add_row shape mismatch");
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] += b[j];
    }
  }
  const Var parents[] = {a, bias};
  return a.tape->push(std::move(out), parents, [a, bias](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    accumulate(tape, a, g.data());
    if (tape.requires_grad(bias.id)) {
      auto acc = tape.grad_accumulator(bias.id).data();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) {
          acc[j] += row[j];
        }
      }
    }
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.same_shape(y), ErrorCode::InvalidInput, "mul shape mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= y[i];
  }
  const Var parents[] = {a, b};
  return a.tape->push(std::move(out), parents, [a, b](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    std::vector<double> ga(g.size());
    std::vector<double> gb(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * y[i];
      gb[i] = g[i] * x[i];
    }
    accumulate(tape, a, ga);
    accumulate(tape, b, gb);
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) {
    v *= c;
  }
  const Var parents[] = {a};
  return a.tape->push(std::move(out), parents, [a, c](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * c;
    }
    accumulate(tape, a, ga);
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) {
    total += v;
  }
  const Var parents[] = {a};
  return a.tape->push(Tensor::scalar(total), parents, [a](Tape& tape, int self) {
    const double g = tape.grad_of(self)[0];
    std::vector<double> ga(a.value().size(), g);
    accumulate(tape, a, ga);
  });
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.rank() == 2 && y.rank() == 2 && x.cols() == y.rows(), ErrorCode::InvalidInput,
          "matmul shape mismatch");
  Tensor out = numerics::matmul(x, y);
  const Var parents[] = {a, b};
  return a.tape->push(std::move(out), parents, [a, b](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const std::size_t m = x.rows();
    const std::size_t k = x.cols();
    const std::size_t n = y.cols();
    if (tape.requires_grad(a.id)) {
      const Tensor yt = transpose(y);
      matmul_accumulate(g.data(), yt.data(), tape.grad_accumulator(a.id).data(), m, n, k);
    }
    if (tape.requires_grad(b.id)) {
      const Tensor xt = transpose(x);
      matmul_accumulate(xt.data(), g.data(), tape.grad_accumulator(b.id).data(), k, m, n);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.rank() == 2 && y.rank() == 2 && x.cols() == y.cols(), ErrorCode::InvalidInput,
          "matmul_nt shape mismatch");
  Tensor out = numerics::matmul(x, transpose(y));
  const Var parents[] = {a, b};
  return a.tape->push(std::move(out), parents, [a, b](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);  // [m,n]
    const Tensor& x = a.value();           // [m,k]
    const Tensor& y = b.value();           // [n,k]
    const std::size_t m = x.rows();
    const std::size_t k = x.cols();
    const std::size_t n = y.rows();
    if (tape.requires_grad(a.id)) {
      matmul_accumulate(g.data(), y.data(), tape.grad_accumulator(a.id).data(), m, n, k);
    }
    if (tape.requires_grad(b.id)) {
      const Tensor gt = transpose(g);
      matmul_accumulate(gt.data(), x.data(), tape.grad_accumulator(b.id).data(), n, m, k);
    }
  });
}

Var rmsnorm(Var x, Var weight, double eps) {
  check_same_tape(x, weight);
  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  require(in.rank() == 2 && w.size() == in.cols(), ErrorCode::InvalidInput, "rmsnorm shape mismatch");
  Tensor out(in.shape());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    numerics::rmsnorm_row(in.row(r), w.data(), eps, out.row(r));
  }
  const Var parents[] = {x, weight};
  return x.tape->push(std::move(out), parents, [x, weight, eps](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& in = x.value();
    const Tensor& w = weight.value();
    const std::size_t n = in.cols();
    const bool need_x = tape.requires_grad(x.id);
    const bool need_w = tape.requires_grad(weight.id);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      auto xr = in.row(r);
      auto gr = g.row(r);
      double sum_sq = 0.0;
      for (double v : xr) {
        sum_sq += v * v;
      }
      const double inv = 1.0 / std::sqrt(sum_sq / static_cast<double>(n) + eps);
      if (need_w) {
        auto gw = tape.grad_accumulator(weight.id).data();
        for (std::size_t j = 0; j < n; ++j) {
          gw[j] += gr[j] * xr[j] * inv;
        }
      }
      if (need_x) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dot += gr[j] * w[j] * xr[j];
        }
        const double coef = inv * inv * inv * dot / static_cast<double>(n);
        auto gx = tape.grad_accumulator(x.id).row(r);
        for (std::size_t j = 0; j < n; ++j) {
          gx[j] += inv * gr[j] * w[j] - coef * xr[j];
        }
      }
    }
  });
}

Var silu(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = in[i] / (1.0 + std::exp(-in[i]));
  }
  const Var parents[] = {x};
  return x.tape->push(std::move(out), parents, [x](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& in = x.value();
    std::vector<double> gx(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-in[i]));
      gx[i] = g[i] * (s + in[i] * s * (1.0 - s));
    }
    accumulate(tape, x, gx);
  });
}

Var elu_plus_one(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = in[i] > 0.0 ? in[i] + 1.0 : std::exp(in[i]);
  }
  const Var parents[] = {x};
  return x.tape->push(std::move(out), parents, [x](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& in = x.value();
    std::vector<double> gx(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      gx[i] = g[i] * (in[i] > 0.0 ? 1.0 : std::exp(in[i]));
    }
    accumulate(tape, x, gx);
  });
}

Var causal_softmax(Var scores, double c) {
  const Tensor& s = scores.value();
  require(s.rank() == 2 && s.rows() == s.cols(), ErrorCode::InvalidInput,
          "causal_softmax expects a square matrix");
  const std::size_t t_len = s.rows();
  Tensor out(s.shape());
  for (std::size_t t = 0; t < t_len; ++t) {
    auto row = out.row(t).first(t + 1);
    auto in = s.row(t);
    for (std::size_t j = 0; j <= t; ++j) {
      row[j] = c * in[j];
    }
    numerics::softmax_inplace(row);
  }
  const Var parents[] = {scores};
  return scores.tape->push(std::move(out), parents, [scores, c](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& y = tape.value(Var{&tape, self});
    auto& gs = tape.grad_accumulator(scores.id);
    for (std::size_t t = 0; t < y.rows(); ++t) {
      auto yr = y.row(t);
      auto gr = g.row(t);
      double dot = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        dot += gr[j] * yr[j];
      }
      auto out_row = gs.row(t);
      for (std::size_t j = 0; j <= t; ++j) {
        out_row[j] += c * yr[j] * (gr[j] - dot);
      }
    }
  });
}

Var causal_row_normalize(Var a) {
  const Tensor& in = a.value();
  require(in.rank() == 2 && in.rows() == in.cols(), ErrorCode::InvalidInput,
          "causal_row_normalize expects a square matrix");
  Tensor out(in.shape());
  for (std::size_t t = 0; t < in.rows(); ++t) {
    auto src = in.row(t);
    double total = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      total += src[j];
    }
    require(total > 0.0, ErrorCode::InvalidInput, "causal_row_normalize row has no positive mass");
    auto dst = out.row(t);
    for (std::size_t j = 0; j <= t; ++j) {
      dst[j] = src[j] / total;
    }
  }
  const Var parents[] = {a};
  return a.tape->push(std::move(out), parents, [a](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    const Tensor& y = tape.value(Var{&tape, self});
    const Tensor& in = a.value();
    auto& ga = tape.grad_accumulator(a.id);
    for (std::size_t t = 0; t < in.rows(); ++t) {
      auto src = in.row(t);
      auto yr = y.row(t);
      auto gr = g.row(t);
      double total = 0.0;
      double dot = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        total += src[j];
        dot += gr[j] * yr[j];
      }
      auto out_row = ga.row(t);
      for (std::size_t j = 0; j <= t; ++j) {
        out_row[j] += (gr[j] - dot) / total;
      }
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& in = x.value();
  require(in.rank() == 2 && begin < end && end <= in.cols(), ErrorCode::InvalidInput,
          "slice_cols range out of bounds");
  const std::size_t width = end - begin;
  Tensor out = Tensor::matrix(in.rows(), width);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    auto src = in.row(r);
    auto dst = out.row(r);
    for (std::size_t j = 0; j < width; ++j) {
      dst[j] = src[begin + j];
    }
  }
  const Var parents[] = {x};
  return x.tape->push(std::move(out), parents, [x, begin, width](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    auto& gx = tape.grad_accumulator(x.id);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto src = g.row(r);
      auto dst = gx.row(r);
      for (std::size_t j = 0; j < width; ++j) {
        dst[begin + j] += src[j];
      }
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& in = x.value();
  require(in.rank() == 2 && begin < end && end <= in.rows(), ErrorCode::InvalidInput,
          "slice_rows range out of bounds");
  const std::size_t n = in.cols();
  Tensor out = Tensor::matrix(end - begin, n);
  std::copy(in.data().begin() + begin * n, in.data().begin() + end * n, out.data().begin());
  const Var parents[] = {x};
  return x.tape->push(std::move(out), parents, [x, begin, n](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    auto gx = tape.grad_accumulator(x.id).data().subspan(begin * n, g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::InvalidInput, "concat_cols of nothing");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    require(p.value().rank() == 2 && p.value().rows() == rows, ErrorCode::InvalidInput,
            "concat_cols row mismatch");
    total += p.value().cols();
  }
  Tensor out = Tensor::matrix(rows, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + offset);
    }
    offset += v.cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return parts[0].tape->push(std::move(out), parts, [owned](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    std::size_t offset = 0;
    for (const Var& p : owned) {
      const std::size_t width = p.value().cols();
      if (tape.requires_grad(p.id)) {
        auto& gp = tape.grad_accumulator(p.id);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto src = g.row(r);
          auto dst = gp.row(r);
          for (std::size_t j = 0; j < width; ++j) {
            dst[j] += src[offset + j];
          }
        }
      }
      offset += width;
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& t = table.value();
  require(t.rank() == 2, ErrorCode::InvalidInput, "embedding table must be a matrix");
  const std::size_t n = t.cols();
  Tensor out = Tensor::matrix(ids.size(), n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < t.rows(), ErrorCode::InvalidInput,
            "embedding id " + std::to_string(ids[i]) + " out of range");
    std::copy(t.row(ids[i]).begin(), t.row(ids[i]).end(), out.row(i).begin());
  }
  std::vector<int> owned(ids.begin(), ids.end());
  const Var parents[] = {table};
  return table.tape->push(std::move(out), parents, [table, owned](Tape& tape, int self) {
    const Tensor& g = tape.grad_of(self);
    auto& gt = tape.grad_accumulator(table.id);
    for (std::size_t i = 0; i < owned.size(); ++i) {
      auto src = g.row(i);
      auto dst = gt.row(owned[i]);
      for (std::size_t j = 0; j < src.size(); ++j) {
        dst[j] += src[j];
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& z = logits.value();
  require(z.rank() == 2 && z.rows() == targets.size() && !targets.empty(), ErrorCode::InvalidInput,
          "cross_entropy expects logits[T,V] and T targets");
  double total = 0.0;
  for (std::size_t t = 0; t < z.rows(); ++t) {
    require(targets[t] >= 0 && static_cast<std::size_t>(targets[t]) < z.cols(),
            ErrorCode::InvalidInput, "cross_entropy target out of range");
    total += numerics::log_sum_exp(z.row(t)) - z(t, targets[t]);
  }
  const double count = static_cast<double>(z.rows());
  std::vector<int> owned(targets.begin(), targets.end());
  const Var parents[] = {logits};
  return logits.tape->push(Tensor::scalar(total / count), parents,
                           [logits, owned, count](Tape& tape, int self) {
    const double g = tape.grad_of(self)[0];
    const Tensor& z = logits.value();
    auto& gz = tape.grad_accumulator(logits.id);
    std::vector<double> probs;
    for (std::size_t t = 0; t < z.rows(); ++t) {
      probs.assign(z.row(t).begin(), z.row(t).end());
      numerics::softmax_inplace(probs);
      probs[owned[t]] -= 1.0;
      auto dst = gz.row(t);
      for (std::size_t j = 0; j < probs.size(); ++j) {
        dst[j] += g * probs[j] / count;
      }
    }
  });
}

}  // namespace layertracer::autodiff
