#include "dmr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dmr/error.hpp"

namespace dmr {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("tensor: " + std::to_string(data.size()) +
                     " values do not fill shape " + shape_string(shape));
  }
}

namespace ad {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Var::grad() const {
  if (const Tensor* g = tape_->grad_if_any(id_)) return *g;
  return Tensor(shape());
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor* Tape::grad_if_any(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.touched ? &n.grad : nullptr;
}

Tensor* Tape::accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.touched) {
    n.grad = Tensor(n.value.shape);
    n.touched = true;
  }
  return &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_string(loss.shape()));
  }
  for (Node& n : nodes_) {
    n.touched = false;
    n.grad = Tensor();
  }
  Tensor* seed = accumulator(loss.id());
  if (!seed) return;
  seed->data[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.touched && n.backward) n.backward(*this, i);
  }
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) +
                   " and " + shape_string(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a) {
  throw ShapeError(std::string(op) + ": unsupported shape " + shape_string(a));
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

// Elementwise unary op given f(x) and f'(x, f(x)).
template <typename F, typename D>
Var unary(Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape().record(std::move(out), {a}, [df](Tape& t, std::size_t self) {
    const std::size_t in = t.input(self, 0);
    Tensor* g = t.accumulator(in);
    if (!g) return;
    const Tensor& x = t.value(in);
    const Tensor& y = t.value(self);
    const Tensor& up = t.upstream(self);
    for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += up[i] * df(x[i], y[i]);
  });
}

// Broadcasting binary op: value f(a, b), partials da(a, b), db(a, b).
template <typename F, typename DA, typename DB>
Var binary(const char* name, Var a, Var b, F f, DA da, DB db) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!is_suffix(x.shape, y.shape)) shape_error(name, x.shape, y.shape);
  const std::size_t m = y.size();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i % m]);
  return a.tape().record(
      std::move(out), {a, b}, [da, db](Tape& t, std::size_t self) {
        const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        const Tensor& up = t.upstream(self);
        const std::size_t m = y.size();
        if (Tensor* ga = t.accumulator(ia)) {
          for (std::size_t i = 0; i < x.size(); ++i)
            (*ga)[i] += up[i] * da(x[i], y[i % m]);
        }
        if (Tensor* gb = t.accumulator(ib)) {
          for (std::size_t i = 0; i < x.size(); ++i)
            (*gb)[i % m] += up[i] * db(x[i], y[i % m]);
        }
      });
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_string(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void check_unit_interval(const char* op, const Tensor& p) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0)) {
      throw Error(std::string(op) + ": probability " + std::to_string(p[i]) +
                  " at index " + std::to_string(i) + " outside [0,1]");
    }
  }
}

Var identity_backward(Var p, Tensor z) {
  return p.tape().record(std::move(z), {p}, [](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const Tensor& up = t.upstream(self);
      for (std::size_t i = 0; i < up.size(); ++i) (*g)[i] += up[i];
    }
  });
}

void check_pool_args(const char* op, const Tensor& x, const Tensor& valid) {
  if (x.rank() != 3 || valid.rank() != 2 || valid.dim(0) != x.dim(0) ||
      valid.dim(1) != x.dim(1)) {
    shape_error(op, x.shape, valid.shape);
  }
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double c) {
  return unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

Var pow(Var a, int exponent) {
  auto ipow = [](double x, int k) {
    double r = 1.0;
    for (int i = 0; i < k; ++i) r *= x;
    return r;
  };
  if (exponent < 0) throw Error("pow: negative exponent " + std::to_string(exponent));
  return unary(
      a, [=](double x) { return ipow(x, exponent); },
      [=](double x, double) {
        return exponent == 0 ? 0.0 : exponent * ipow(x, exponent - 1);
      });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.rank() < 1 || w.rank() != 2 || x.cols() != w.dim(0)) {
    shape_error("matmul", x.shape, w.shape);
  }
  const std::size_t n = x.rows(), k = w.dim(0), m = w.dim(1);
  Shape out_shape = x.shape;
  out_shape.back() = m;
  Tensor out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* wr = &w[p * m];
      for (std::size_t j = 0; j < m; ++j) o[j] += xv * wr[j];
    }
  }
  return a.tape().record(std::move(out), {a, b}, [n, k, m](Tape& t, std::size_t self) {
    const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
    const Tensor& x = t.value(ia);
    const Tensor& w = t.value(ib);
    const Tensor& up = t.upstream(self);
    if (Tensor* gx = t.accumulator(ia)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* u = &up[i * m];
        for (std::size_t p = 0; p < k; ++p) {
          const double* wr = &w[p * m];
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += u[j] * wr[j];
          (*gx)[i * k + p] += s;
        }
      }
    }
    if (Tensor* gw = t.accumulator(ib)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* u = &up[i * m];
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          if (xv == 0.0) continue;
          double* g = &(*gw)[p * m];
          for (std::size_t j = 0; j < m; ++j) g[j] += xv * u[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) shape_error("transpose", x.shape);
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return a.tape().record(std::move(out), {a}, [r, c](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const Tensor& up = t.upstream(self);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += up[j * r + i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.value().size()) shape_error("reshape", a.shape(), shape);
  Tensor out(std::move(shape), a.value().data);
  return identity_backward(a, std::move(out));
}

Var concat_last(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() == 0 || x.rank() != y.rank() || x.rows() != y.rows() ||
      !std::equal(x.shape.begin(), x.shape.end() - 1, y.shape.begin())) {
    shape_error("concat_last", x.shape, y.shape);
  }
  const std::size_t rows = x.rows(), ca = x.cols(), cb = y.cols();
  Shape s = x.shape;
  s.back() = ca + cb;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&x[r * ca], ca, &out[r * (ca + cb)]);
    std::copy_n(&y[r * cb], cb, &out[r * (ca + cb) + ca]);
  }
  return a.tape().record(std::move(out), {a, b}, [rows, ca, cb](Tape& t, std::size_t self) {
    const Tensor& up = t.upstream(self);
    if (Tensor* ga = t.accumulator(t.input(self, 0))) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ca; ++j) (*ga)[r * ca + j] += up[r * (ca + cb) + j];
    }
    if (Tensor* gb = t.accumulator(t.input(self, 1))) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cb; ++j)
          (*gb)[r * cb + j] += up[r * (ca + cb) + ca + j];
    }
  });
}

Var slice_last(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || begin > end || end > x.cols()) {
    throw ShapeError("slice_last: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for shape " +
                     shape_string(x.shape));
  }
  const std::size_t rows = x.rows(), c = x.cols(), w = end - begin;
  Shape s = x.shape;
  s.back() = w;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&x[r * c + begin], w, &out[r * w]);
  return a.tape().record(std::move(out), {a}, [rows, c, w, begin](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const Tensor& up = t.upstream(self);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) (*g)[r * c + begin + j] += up[r * w + j];
    }
  });
}

Var scale_rows(Var x, Var s) {
  const Tensor& v = x.value();
  const Tensor& f = s.value();
  if (v.rank() == 0 || f.size() != v.rows() ||
      !std::equal(f.shape.begin(), f.shape.end(), v.shape.begin()) ||
      f.rank() + 1 != v.rank()) {
    shape_error("scale_rows", v.shape, f.shape);
  }
  const std::size_t rows = v.rows(), c = v.cols();
  Tensor out(v.shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = v[r * c + j] * f[r];
  return x.tape().record(std::move(out), {x, s}, [rows, c](Tape& t, std::size_t self) {
    const std::size_t ix = t.input(self, 0), is = t.input(self, 1);
    const Tensor& v = t.value(ix);
    const Tensor& f = t.value(is);
    const Tensor& up = t.upstream(self);
    if (Tensor* gx = t.accumulator(ix)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += up[r * c + j] * f[r];
    }
    if (Tensor* gs = t.accumulator(is)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += up[r * c + j] * v[r * c + j];
        (*gs)[r] += acc;
      }
    }
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const double up = t.upstream(self)[0];
      for (double& v : g->data) v += up;
    }
  });
}

Var sum(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const AxisSplit sp = split_axis("sum", x.shape, axis);
  Shape s = x.shape;
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(s);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x[(o * sp.extent + e) * sp.inner + i];
  return a.tape().record(std::move(out), {a}, [sp](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const Tensor& up = t.upstream(self);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < sp.extent; ++e)
          for (std::size_t i = 0; i < sp.inner; ++i)
            (*g)[(o * sp.extent + e) * sp.inner + i] += up[o * sp.inner + i];
    }
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean(Var a, std::size_t axis) {
  const AxisSplit sp = split_axis("mean", a.shape(), axis);
  if (sp.extent == 0) shape_error("mean", a.shape());
  return scale(sum(a, axis), 1.0 / static_cast<double>(sp.extent));
}

Var l2_norm(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data) s += v * v;
  return a.tape().record(Tensor::scalar(std::sqrt(s)), {a}, [](Tape& t, std::size_t self) {
    const std::size_t in = t.input(self, 0);
    Tensor* g = t.accumulator(in);
    const double norm = t.value(self)[0];
    if (!g || norm == 0.0) return;
    const Tensor& x = t.value(in);
    const double up = t.upstream(self)[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += up * x[i] / norm;
  });
}

Var softmax(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) shape_error("softmax", x.shape);
  const std::size_t rows = x.rows(), c = x.cols();
  Tensor out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &x[r * c];
    double* o = &out[r * c];
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return a.tape().record(std::move(out), {a}, [rows, c](Tape& t, std::size_t self) {
    Tensor* g = t.accumulator(t.input(self, 0));
    if (!g) return;
    const Tensor& y = t.value(self);
    const Tensor& up = t.upstream(self);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += up[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*g)[r * c + j] += y[r * c + j] * (up[r * c + j] - dot);
    }
  });
}

Var gather_rows(Var table, std::span<const std::int32_t> ids, Shape lead_shape,
                std::size_t frozen_row) {
  const Tensor& w = table.value();
  if (w.rank() != 2 || shape_size(lead_shape) != ids.size()) {
    throw ShapeError("gather_rows: table " + shape_string(w.shape) + " with " +
                     std::to_string(ids.size()) + " ids into lead shape " +
                     shape_string(lead_shape));
  }
  const std::size_t vocab = w.dim(0), e = w.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw Error("gather_rows: id " + std::to_string(ids[i]) + " at position " +
                  std::to_string(i) + " outside table of " + std::to_string(vocab) +
                  " rows");
    }
  }
  Shape s = std::move(lead_shape);
  s.push_back(e);
  Tensor out(s);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(&w[static_cast<std::size_t>(ids[i]) * e], e, &out[i * e]);
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return table.tape().record(
      std::move(out), {table},
      [kept = std::move(kept), e, frozen_row](Tape& t, std::size_t self) {
        Tensor* g = t.accumulator(t.input(self, 0));
        if (!g) return;
        const Tensor& up = t.upstream(self);
        for (std::size_t i = 0; i < kept.size(); ++i) {
          const auto row = static_cast<std::size_t>(kept[i]);
          if (row == frozen_row) continue;
          for (std::size_t j = 0; j < e; ++j) (*g)[row * e + j] += up[i * e + j];
        }
      });
}

Var masked_max_pool(Var x, const Tensor& valid) {
  const Tensor& v = x.value();
  check_pool_args("masked_max_pool", v, valid);
  const std::size_t b = v.dim(0), l = v.dim(1), h = v.dim(2);
  Tensor out(Shape{b, h});
  std::vector<std::size_t> argmax(b * h);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < h; ++k) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t at = l;
      for (std::size_t p = 0; p < l; ++p) {
        if (valid[i * l + p] == 0.0) continue;
        const double val = v[(i * l + p) * h + k];
        if (at == l || val > best) {
          best = val;
          at = p;
        }
      }
      if (at == l) throw Error("masked_max_pool: row " + std::to_string(i) + " has no valid positions");
      out[i * h + k] = best;
      argmax[i * h + k] = (i * l + at) * h + k;
    }
  }
  return x.tape().record(std::move(out), {x}, [argmax = std::move(argmax)](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const Tensor& up = t.upstream(self);
      for (std::size_t i = 0; i < argmax.size(); ++i) (*g)[argmax[i]] += up[i];
    }
  });
}

Var masked_mean_pool(Var x, const Tensor& valid) {
  const Tensor& v = x.value();
  check_pool_args("masked_mean_pool", v, valid);
  const std::size_t b = v.dim(0), l = v.dim(1), h = v.dim(2);
  Tensor out(Shape{b, h});
  std::vector<double> inv_count(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t count = 0;
    for (std::size_t p = 0; p < l; ++p) {
      if (valid[i * l + p] == 0.0) continue;
      ++count;
      for (std::size_t k = 0; k < h; ++k) out[i * h + k] += v[(i * l + p) * h + k];
    }
    if (count == 0) throw Error("masked_mean_pool: row " + std::to_string(i) + " has no valid positions");
    inv_count[i] = 1.0 / static_cast<double>(count);
    for (std::size_t k = 0; k < h; ++k) out[i * h + k] /= static_cast<double>(count);
  }
  return x.tape().record(
      std::move(out), {x},
      [valid, inv_count = std::move(inv_count), b, l, h](Tape& t, std::size_t self) {
        Tensor* g = t.accumulator(t.input(self, 0));
        if (!g) return;
        const Tensor& up = t.upstream(self);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t p = 0; p < l; ++p) {
            if (valid[i * l + p] == 0.0) continue;
            for (std::size_t k = 0; k < h; ++k)
              (*g)[(i * l + p) * h + k] += up[i * h + k] * inv_count[i];
          }
      });
}

Var pick(Var x, std::span<const int> index) {
  const Tensor& v = x.value();
  if (v.rank() != 2 || v.dim(0) != index.size()) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for shape " +
                     shape_string(v.shape));
  }
  const std::size_t c = v.dim(1);
  Tensor out(Shape{index.size()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw Error("pick: index " + std::to_string(index[i]) + " out of range for " +
                  std::to_string(c) + " columns");
    }
    out[i] = v[i * c + static_cast<std::size_t>(index[i])];
  }
  std::vector<int> kept(index.begin(), index.end());
  return x.tape().record(std::move(out), {x}, [kept = std::move(kept), c](Tape& t, std::size_t self) {
    if (Tensor* g = t.accumulator(t.input(self, 0))) {
      const Tensor& up = t.upstream(self);
      for (std::size_t i = 0; i < kept.size(); ++i)
        (*g)[i * c + static_cast<std::size_t>(kept[i])] += up[i];
    }
  });
}

Var pairwise_sq_dist(Var x, Var y) {
  const Tensor& a = x.value();
  const Tensor& b = y.value();
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_error("pairwise_sq_dist", a.shape, b.shape);
  }
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[i * d + k] - b[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  return x.tape().record(std::move(out), {x, y}, [n, m, d](Tape& t, std::size_t self) {
    const std::size_t ix = t.input(self, 0), iy = t.input(self, 1);
    const Tensor& a = t.value(ix);
    const Tensor& b = t.value(iy);
    const Tensor& up = t.upstream(self);
    Tensor* ga = t.accumulator(ix);
    Tensor* gb = t.accumulator(iy);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double u = 2.0 * up[i * m + j];
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = a[i * d + k] - b[j * d + k];
          if (ga) (*ga)[i * d + k] += u * diff;
          if (gb) (*gb)[j * d + k] -= u * diff;
        }
      }
  });
}

Var stop_gradient(Var a) {
  return a.tape().constant(a.value());
}

Var straight_through(Var p, double threshold) {
  const Tensor& probs = p.value();
  check_unit_interval("straight_through", probs);
  Tensor z(probs.shape);
  for (std::size_t i = 0; i < probs.size(); ++i) z[i] = probs[i] >= threshold ? 1.0 : 0.0;
  return identity_backward(p, std::move(z));
}

Var straight_through_sample(Var p, Rng& rng) {
  const Tensor& probs = p.value();
  check_unit_interval("straight_through_sample", probs);
  Tensor z(probs.shape);
  for (std::size_t i = 0; i < probs.size(); ++i) z[i] = rng.bernoulli(probs[i]) ? 1.0 : 0.0;
  return identity_backward(p, std::move(z));
}

}  // namespace ad
}  // namespace dmr
