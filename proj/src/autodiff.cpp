#include "onda/autodiff.hpp"

#include <algorithm>
#include <cstring>
#include <string>

namespace onda {

Var Graph::constant(Tensor value) {
  value.check_finite("constant");
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(Tensor& param) {
  param.check_finite("parameter");
  Node node;
  node.value = param;
  node.value.clear_grad();
  node.bound = &param;
  node.requires_grad = param.requires_grad();
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  const int self = static_cast<int>(nodes_.size());
  bool needs = false;
  for (int in : inputs) {
    if (in < 0 || in >= self) throw Error("graph input id " + std::to_string(in) + " is not an earlier node");
    needs = needs || nodes_[static_cast<std::size_t>(in)].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, self};
}

bool Graph::any_requires_grad(std::initializer_list<Var> vars) const {
  return std::any_of(vars.begin(), vars.end(), [this](const Var& v) { return requires_grad(v.id); });
}

Tensor::Array& Graph::adjoint(int id) {
  Node& node = nodes_.at(static_cast<std::size_t>(id));
  if (!node.has_adj) {
    node.adj = Tensor::Array::Zero(node.value.numel());
    node.has_adj = true;
  }
  return node.adj;
}

const Tensor::Array* Graph::adjoint_if(int id) const {
  const Node& node = nodes_.at(static_cast<std::size_t>(id));
  return node.has_adj ? &node.adj : nullptr;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw Error("backward: loss belongs to another graph");
  const Tensor& lv = value(loss.id);
  if (lv.numel() != 1) throw ShapeError("backward on non-scalar of shape " + shape_string(lv.shape()), -1);
  lv.check_finite("loss");

  for (Node& node : nodes_) {
    node.has_adj = false;
    node.adj.resize(0);
  }
  adjoint(loss.id)[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.has_adj || !node.requires_grad) continue;
    if (node.backward) node.backward(*this, id);
    if (node.bound != nullptr) {
      Tensor::Array& g = node.bound->grad();
      g += node.adj;
      if (!g.isFinite().all()) throw NonFiniteError("non-finite gradient");
    }
  }
}

void sgd_step(std::span<Tensor* const> params, double lr) {
  if (!(lr >= 0.0)) throw ConfigError("sgd_step: learning rate must be non-negative");
  for (Tensor* p : params) {
    if (!p->has_grad()) continue;
    if (lr > 0.0) p->data() -= lr * p->grad();
    p->zero_grad();
  }
}

namespace ops {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.graph != b.graph) throw Error(std::string(op) + ": operands from different graphs");
  expect_shape(b.shape(), a.shape(), op);
}

Tensor checked(Tensor t, const char* op) {
  t.check_finite(op);
  return t;
}

// Output rows per im2col chunk; keeps the column buffer cache resident.
constexpr Index kChunkRows = 8;

// Builds the im2col block for output rows [y0, y1): rows of `cols` are
// (c, ky, kx) taps, columns are the output pixels of the chunk.
void im2col(const double* in, Index channels, Index height, Index width, Index k, Index pad,
            Index y0, Index y1, double* cols) {
  const Index span = (y1 - y0) * width;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * span;
        const Index dx = kx - pad;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(width, width - dx);
        for (Index y = y0; y < y1; ++y) {
          double* out = row + (y - y0) * width;
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= height) {
            std::fill(out, out + width, 0.0);
            continue;
          }
          const double* src = in + (c * height + sy) * width;
          std::fill(out, out + x0, 0.0);
          std::memcpy(out + x0, src + x0 + dx, static_cast<std::size_t>(x1 - x0) * sizeof(double));
          std::fill(out + x1, out + width, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* cols, Index channels, Index height, Index width, Index k, Index pad,
                Index y0, Index y1, double* out) {
  const Index span = (y1 - y0) * width;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * span;
        const Index dx = kx - pad;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(width, width - dx);
        for (Index y = y0; y < y1; ++y) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          const double* src = row + (y - y0) * width;
          double* dst = out + (c * height + sy) * width;
          for (Index x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

using ConstMap = Eigen::Map<const RowMatrix<double>, 0, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMatrix<double>, 0, Eigen::OuterStride<>>;

}  // namespace

Var conv2d(Var input, Var kernel, Var bias, int padding) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  const Tensor& b = bias.value();
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_string(x.shape()), -1);
  if (w.rank() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,k,k], got " + shape_string(w.shape()), -1);
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), k = w.dim(2);
  expect_shape(w.shape(), {cout, cin, k, k}, "conv2d kernel");
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k), 2);
  if (padding != (k - 1) / 2) {
    throw ShapeError("conv2d: padding " + std::to_string(padding) + " does not preserve size for k=" +
                         std::to_string(k),
                     2);
  }
  expect_shape(b.shape(), {cout}, "conv2d bias");

  const Index taps = cin * k * k, hw = h * wd;
  Eigen::Map<const RowMatrix<double>> wmat(w.ptr(), cout, taps);
  Tensor out(Shape{n, cout, h, wd});
  RowMatrix<double> cols;
  if (k > 1) cols.resize(taps, kChunkRows * wd);
  for (Index s = 0; s < n; ++s) {
    auto dst = out.plane(s);
    if (k == 1) {
      dst.noalias() = wmat * x.plane(s);
    } else {
      const double* xs = x.ptr() + s * cin * hw;
      for (Index y0 = 0; y0 < h; y0 += kChunkRows) {
        const Index y1 = std::min(h, y0 + kChunkRows), span = (y1 - y0) * wd;
        im2col(xs, cin, h, wd, k, padding, y0, y1, cols.data());
        MutMap block(dst.data() + y0 * wd, cout, span, Eigen::OuterStride<>(hw));
        block.noalias() = wmat * ConstMap(cols.data(), taps, span, Eigen::OuterStride<>(span));
      }
    }
    dst.colwise() += b.data().matrix();
  }

  return input.graph->record(
      checked(std::move(out), "conv2d"), {input.id, kernel.id, bias.id},
      [n, cin, h, wd, cout, k, taps, hw, padding](Graph& g, int self) {
        const std::vector<int>& in = g.inputs(self);
        const int xi = in[0], wi = in[1], bi = in[2];
        const Tensor& x = g.value(xi);
        const Tensor& w = g.value(wi);
        const double* gout = g.adjoint(self).data();
        Eigen::Map<const RowMatrix<double>> wmat(w.ptr(), cout, taps);
        const bool need_x = g.requires_grad(xi), need_w = g.requires_grad(wi), need_b = g.requires_grad(bi);

        RowMatrix<double> dw;
        if (need_w) dw = RowMatrix<double>::Zero(cout, taps);
        Eigen::VectorXd db;
        if (need_b) db = Eigen::VectorXd::Zero(cout);
        RowMatrix<double> cols, dcols;
        if (k > 1 && need_w) cols.resize(taps, kChunkRows * wd);
        if (k > 1 && need_x) dcols.resize(taps, kChunkRows * wd);

        for (Index s = 0; s < n; ++s) {
          Eigen::Map<const RowMatrix<double>> gs(gout + s * cout * hw, cout, hw);
          if (need_b) db += gs.rowwise().sum();
          if (k == 1) {
            if (need_w) dw.noalias() += gs * x.plane(s).transpose();
            if (need_x) {
              Eigen::Map<RowMatrix<double>> dxs(g.adjoint(xi).data() + s * cin * hw, cin, hw);
              dxs.noalias() += wmat.transpose() * gs;
            }
            continue;
          }
          const double* xs = x.ptr() + s * cin * hw;
          double* dx = need_x ? g.adjoint(xi).data() + s * cin * hw : nullptr;
          for (Index y0 = 0; y0 < h; y0 += kChunkRows) {
            const Index y1 = std::min(h, y0 + kChunkRows), span = (y1 - y0) * wd;
            ConstMap gblock(gout + s * cout * hw + y0 * wd, cout, span, Eigen::OuterStride<>(hw));
            if (need_w) {
              im2col(xs, cin, h, wd, k, padding, y0, y1, cols.data());
              dw.noalias() += gblock * ConstMap(cols.data(), taps, span, Eigen::OuterStride<>(span)).transpose();
            }
            if (need_x) {
              MutMap dblock(dcols.data(), taps, span, Eigen::OuterStride<>(span));
              dblock.noalias() = wmat.transpose() * gblock;
              col2im_add(dcols.data(), cin, h, wd, k, padding, y0, y1, dx);
            }
          }
        }
        if (need_w) g.adjoint(wi) += Eigen::Map<const Eigen::ArrayXd>(dw.data(), dw.size());
        if (need_b) g.adjoint(bi) += db.array();
      });
}

namespace {

Var batchnorm_impl(Var input, Var gamma, Var beta, BNState* mutable_state, const BNState& state,
                   BNMode mode) {
  const Tensor& x = input.value();
  if (x.rank() != 4) throw ShapeError("batchnorm2d: input must be NCHW, got " + shape_string(x.shape()), -1);
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  expect_shape(gamma.shape(), {c}, "batchnorm2d gamma");
  expect_shape(beta.shape(), {c}, "batchnorm2d beta");
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw ShapeError("batchnorm2d: state has " + std::to_string(state.running_mean.size()) +
                         " channels, input has " + std::to_string(c),
                     1);
  }
  const Index m = n * hw;
  const bool batch_stats = mode != BNMode::Eval;

  using Seg = Eigen::Map<Eigen::ArrayXd>;
  using ConstSeg = Eigen::Map<const Eigen::ArrayXd>;
  auto seg = [hw, c](const double* base, Index s, Index ch) { return ConstSeg(base + (s * c + ch) * hw, hw); };

  Eigen::ArrayXd mean(c), var(c);
  if (batch_stats) {
    for (Index ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (Index s = 0; s < n; ++s) acc += seg(x.ptr(), s, ch).sum();
      mean[ch] = acc / static_cast<double>(m);
      double sq = 0.0;
      for (Index s = 0; s < n; ++s) sq += (seg(x.ptr(), s, ch) - mean[ch]).square().sum();
      var[ch] = sq / static_cast<double>(m);
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  const Eigen::ArrayXd inv_std = (var + state.eps).rsqrt();

  const bool keep = input.graph->any_requires_grad({input, gamma, beta});
  Tensor xhat = keep ? Tensor(x.shape()) : Tensor();
  Tensor out(x.shape());
  const Eigen::ArrayXd& gm = gamma.value().data();
  const Eigen::ArrayXd& bt = beta.value().data();
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (s * c + ch) * hw;
      Seg o(out.ptr() + off, hw);
      if (keep) {
        Seg xh(xhat.ptr() + off, hw);
        xh = (seg(x.ptr(), s, ch) - mean[ch]) * inv_std[ch];
        o = xh * gm[ch] + bt[ch];
      } else {
        const double a = gm[ch] * inv_std[ch];
        o = (seg(x.ptr(), s, ch) - mean[ch]) * a + bt[ch];
      }
    }
  }

  if (mode == BNMode::TrainUpdate) {
    mutable_state->running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean;
    mutable_state->running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var;
  }

  return input.graph->record(
      checked(std::move(out), "batchnorm2d"), {input.id, gamma.id, beta.id},
      [n, c, hw, m, batch_stats, inv_std, xhat = std::move(xhat)](Graph& g, int self) {
        using Seg = Eigen::Map<Eigen::ArrayXd>;
        using ConstSeg = Eigen::Map<const Eigen::ArrayXd>;
        const std::vector<int>& in = g.inputs(self);
        const int xi = in[0], gi = in[1], bi = in[2];
        const Tensor::Array& gout = g.adjoint(self);
        const Eigen::ArrayXd& gm = g.value(gi).data();
        Eigen::ArrayXd sum_dy = Eigen::ArrayXd::Zero(c), sum_dy_xhat = Eigen::ArrayXd::Zero(c);
        for (Index s = 0; s < n; ++s) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (s * c + ch) * hw;
            ConstSeg dy(gout.data() + off, hw);
            sum_dy[ch] += dy.sum();
            sum_dy_xhat[ch] += (dy * ConstSeg(xhat.ptr() + off, hw)).sum();
          }
        }
        if (g.requires_grad(gi)) g.adjoint(gi) += sum_dy_xhat;
        if (g.requires_grad(bi)) g.adjoint(bi) += sum_dy;
        if (!g.requires_grad(xi)) return;
        Tensor::Array& dx = g.adjoint(xi);
        const Eigen::ArrayXd scale = gm * inv_std;
        const double inv_m = 1.0 / static_cast<double>(m);
        for (Index s = 0; s < n; ++s) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (s * c + ch) * hw;
            ConstSeg dy(gout.data() + off, hw);
            Seg dxs(dx.data() + off, hw);
            if (batch_stats) {
              // dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
              dxs += (dy - sum_dy[ch] * inv_m - ConstSeg(xhat.ptr() + off, hw) * (sum_dy_xhat[ch] * inv_m)) *
                     scale[ch];
            } else {
              dxs += dy * scale[ch];
            }
          }
        }
      });
}

}  // namespace

Var batchnorm2d(Var input, Var gamma, Var beta, BNState& state, BNMode mode) {
  return batchnorm_impl(input, gamma, beta, &state, state, mode);
}

Var batchnorm2d(Var input, Var gamma, Var beta, const BNState& state, BNMode mode) {
  if (mode == BNMode::TrainUpdate) throw ConfigError("batchnorm2d: TrainUpdate needs mutable state");
  return batchnorm_impl(input, gamma, beta, nullptr, state, mode);
}

Var relu(Var x) {
  Tensor out(x.shape(), x.value().data().max(0.0));
  return x.graph->record(std::move(out), {x.id}, [](Graph& g, int self) {
    const int xi = g.inputs(self)[0];
    g.adjoint(xi) += (g.value(xi).data() > 0.0).select(g.adjoint(self), 0.0);
  });
}

Var softmax_channel(Var x) {
  const Tensor& v = x.value();
  if (v.rank() != 4) throw ShapeError("softmax_channel: input must be NCHW, got " + shape_string(v.shape()), -1);
  const Index n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out(v.shape());
  Eigen::ArrayXd norm(hw);
  for (Index s = 0; s < n; ++s) {
    auto in = v.plane(s).array();
    auto p = out.plane(s).array();
    norm = in.row(0).transpose();
    for (Index k = 1; k < c; ++k) norm = norm.max(in.row(k).transpose());
    for (Index k = 0; k < c; ++k) p.row(k) = (in.row(k) - norm.transpose()).exp();
    norm = p.row(0).transpose();
    for (Index k = 1; k < c; ++k) norm += p.row(k).transpose();
    norm = norm.inverse();
    for (Index k = 0; k < c; ++k) p.row(k) *= norm.transpose();
  }
  return x.graph->record(checked(std::move(out), "softmax_channel"), {x.id}, [](Graph& g, int self) {
    const int xi = g.inputs(self)[0];
    const Tensor& p = g.value(self);
    const Index n = p.dim(0), c = p.dim(1), hw = p.dim(2) * p.dim(3);
    const Tensor::Array& gout = g.adjoint(self);
    Tensor::Array& dx = g.adjoint(xi);
    using Plane = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using MutPlane = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    Eigen::ArrayXd dot(hw);
    for (Index s = 0; s < n; ++s) {
      Plane dy(gout.data() + s * c * hw, c, hw);
      MutPlane dxs(dx.data() + s * c * hw, c, hw);
      const auto ps = p.plane(s).array();
      dot.setZero();
      for (Index k = 0; k < c; ++k) dot += (dy.row(k) * ps.row(k)).transpose();
      for (Index k = 0; k < c; ++k) dxs.row(k) += ps.row(k) * (dy.row(k) - dot.transpose());
    }
  });
}

Var log(Var x, double floor) {
  const Tensor::Array& v = x.value().data();
  Tensor out(x.shape(), v.max(floor).log());
  return x.graph->record(checked(std::move(out), "log"), {x.id}, [floor](Graph& g, int self) {
    const int xi = g.inputs(self)[0];
    const Tensor::Array& v = g.value(xi).data();
    g.adjoint(xi) += (v > floor).select(g.adjoint(self) / v, 0.0);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.value().data() + b.value().data());
  return a.graph->record(checked(std::move(out), "add"), {a.id, b.id}, [](Graph& g, int self) {
    const auto& in = g.inputs(self);
    if (g.requires_grad(in[0])) g.adjoint(in[0]) += g.adjoint(self);
    if (g.requires_grad(in[1])) g.adjoint(in[1]) += g.adjoint(self);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.value().data() - b.value().data());
  return a.graph->record(checked(std::move(out), "sub"), {a.id, b.id}, [](Graph& g, int self) {
    const auto& in = g.inputs(self);
    if (g.requires_grad(in[0])) g.adjoint(in[0]) += g.adjoint(self);
    if (g.requires_grad(in[1])) g.adjoint(in[1]) -= g.adjoint(self);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.value().data() * b.value().data());
  return a.graph->record(checked(std::move(out), "mul"), {a.id, b.id}, [](Graph& g, int self) {
    const auto& in = g.inputs(self);
    if (g.requires_grad(in[0])) g.adjoint(in[0]) += g.adjoint(self) * g.value(in[1]).data();
    if (g.requires_grad(in[1])) g.adjoint(in[1]) += g.adjoint(self) * g.value(in[0]).data();
  });
}

Var scale(Var x, double s) {
  Tensor out(x.shape(), x.value().data() * s);
  return x.graph->record(checked(std::move(out), "scale"), {x.id}, [s](Graph& g, int self) {
    g.adjoint(g.inputs(self)[0]) += s * g.adjoint(self);
  });
}

Var sum(Var x) {
  Tensor out = Tensor::scalar(x.value().data().sum());
  return x.graph->record(checked(std::move(out), "sum"), {x.id}, [](Graph& g, int self) {
    g.adjoint(g.inputs(self)[0]) += g.adjoint(self)[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

}  // namespace ops
}  // namespace onda
