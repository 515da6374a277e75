#include "fine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fine {

namespace {

std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

// Resolves the tape shared by the inputs; nullptr when all are constants.
Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tape && tape != t->tape())
            throw ContractError("operands belong to two different gradient tapes");
        tape = t->tape();
    }
    return tape;
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor --------------------------------------------------------------

std::size_t Tensor::size() const { return storage_ ? storage_->size() : 0; }

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    std::size_t n = shape_size(shape);
    t.shape_ = std::move(shape);
    t.storage_ = std::make_shared<std::vector<double>>(n, 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.storage_->begin(), t.storage_->end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    if (shape_size(shape) != values.size())
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.storage_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::detached_copy() const {
    Tensor t;
    t.shape_ = shape_;
    t.storage_ = std::make_shared<std::vector<double>>(*storage_);
    return t;
}

// ---- Tape ----------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) {
    if (!value.defined()) throw ContractError("cannot register an undefined tensor as leaf");
    Tensor t = value; // shares storage
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, nullptr, value.size()});
    grads_.emplace_back();
    return t;
}

Tensor Tape::make(std::vector<int> shape, std::vector<double> values,
                  std::vector<int> parents,
                  std::function<void(Tape&, const std::vector<double>&)> back) {
    Tensor t = Tensor::from(std::move(shape), std::move(values));
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    std::vector<int> real_parents;
    for (int p : parents)
        if (p >= 0) real_parents.push_back(p);
    nodes_.push_back(Node{std::move(real_parents), std::move(back), t.size()});
    grads_.emplace_back();
    return t;
}

std::vector<double>& Tape::grad_buf(int node) {
    std::vector<double>& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].size, 0.0);
    return g;
}

void Tape::backward(const Tensor& loss) {
    if (backward_done_)
        throw ContractError("backward already ran on this tape; build a fresh tape per pass");
    if (loss.tape() != this)
        throw ContractError("loss tensor is not recorded on this tape");
    if (loss.size() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    backward_done_ = true;

    const int n = static_cast<int>(nodes_.size());
    std::vector<char> needed(static_cast<std::size_t>(n), 0);
    needed[static_cast<std::size_t>(loss.node())] = 1;
    for (int id = loss.node(); id >= 0; --id) {
        if (!needed[static_cast<std::size_t>(id)]) continue;
        for (int p : nodes_[static_cast<std::size_t>(id)].parents)
            needed[static_cast<std::size_t>(p)] = 1;
    }

    grad_buf(loss.node())[0] = 1.0;
    for (int id = loss.node(); id >= 0; --id) {
        if (!needed[static_cast<std::size_t>(id)]) continue;
        Node& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.back) continue;
        node.back(*this, grad_buf(id));
    }
}

Tensor Tape::grad(const Tensor& t) const {
    if (t.tape() != this) throw ContractError("tensor is not on this tape");
    if (!backward_done_) throw ContractError("grad queried before backward");
    const std::vector<double>& g = grads_[static_cast<std::size_t>(t.node())];
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor::from(t.shape(), g);
}

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tape* tape = common_tape({&a, &b});
    const double* pa = a.data();
    const double* pb = b.data();
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        const double* arow = pa + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (!tape) return Tensor::from({m, n}, std::move(out));
    tape->count_macs(static_cast<long long>(m) * k * n);

    const int na = a.node(), nb = b.node();
    auto sa = a.storage(), sb = b.storage();
    return tape->make({m, n}, std::move(out), {na, nb},
                      [=](Tape& t, const std::vector<double>& g) {
                          if (na >= 0) {
                              std::vector<double>& da = t.grad_buf(na);
                              const double* B = sb->data();
                              for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < n; ++j) {
                                      const double gij = g[static_cast<std::size_t>(i) * n + j];
                                      if (gij == 0.0) continue;
                                      for (int kk = 0; kk < k; ++kk)
                                          da[static_cast<std::size_t>(i) * k + kk] +=
                                              gij * B[static_cast<std::size_t>(kk) * n + j];
                                  }
                          }
                          if (nb >= 0) {
                              std::vector<double>& db = t.grad_buf(nb);
                              const double* A = sa->data();
                              for (int i = 0; i < m; ++i)
                                  for (int kk = 0; kk < k; ++kk) {
                                      const double aik = A[static_cast<std::size_t>(i) * k + kk];
                                      if (aik == 0.0) continue;
                                      const double* grow = g.data() + static_cast<std::size_t>(i) * n;
                                      double* drow = db.data() + static_cast<std::size_t>(kk) * n;
                                      for (int j = 0; j < n; ++j) drow[j] += aik * grow[j];
                                  }
                          }
                      });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(x.shape()));
    const int r = x.rows(), c = x.cols();
    std::vector<double> out(x.size());
    const double* p = x.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(j) * r + i] = p[static_cast<std::size_t>(i) * c + j];
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from({c, r}, std::move(out));
    const int nx = x.node();
    return tape->make({c, r}, std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          for (int j = 0; j < c; ++j)
                              for (int i = 0; i < r; ++i)
                                  dx[static_cast<std::size_t>(i) * c + j] +=
                                      g[static_cast<std::size_t>(j) * r + i];
                      });
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("softmax: axis out of range for shape " + shape_str(x.shape()));
    const std::vector<int>& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[i]);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(shape[i]);
    const std::size_t n = static_cast<std::size_t>(shape[axis]);

    const double* p = x.data();
    std::vector<double> out(x.size());
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            // -inf entries are allowed (attention masking); NaN or +inf are not.
            double mx = neg_inf;
            for (std::size_t t = 0; t < n; ++t) {
                const double v = p[base + t * inner];
                if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
                    throw NumericError("softmax: non-finite input");
                mx = std::max(mx, v);
            }
            if (mx == neg_inf)
                throw NumericError("softmax: all inputs are -inf along the reduction axis");
            double denom = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                const double e = std::exp(p[base + t * inner] - mx);
                out[base + t * inner] = e;
                denom += e;
            }
            for (std::size_t t = 0; t < n; ++t) out[base + t * inner] /= denom;
        }
    }
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from(shape, std::move(out));
    const int nx = x.node();
    auto sy = std::make_shared<std::vector<double>>(out); // keep outputs for backward
    return tape->make(shape, std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          const double* y = sy->data();
                          for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t in = 0; in < inner; ++in) {
                                  const std::size_t base = o * n * inner + in;
                                  double dot = 0.0;
                                  for (std::size_t tt = 0; tt < n; ++tt)
                                      dot += g[base + tt * inner] * y[base + tt * inner];
                                  for (std::size_t tt = 0; tt < n; ++tt)
                                      dx[base + tt * inner] +=
                                          y[base + tt * inner] * (g[base + tt * inner] - dot);
                              }
                      });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw DimensionError("layernorm expects rank >= 1");
    const int c = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c)
        throw DimensionError("layernorm: affine shapes " + shape_str(gain.shape()) + "/" +
                             shape_str(bias.shape()) + " do not match feature dim " +
                             std::to_string(c));
    const std::size_t rows = x.size() / static_cast<std::size_t>(c);
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();

    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * static_cast<std::size_t>(c);
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = istd;
        for (int j = 0; j < c; ++j) {
            const double xh = (row[j] - mean) * istd;
            (*xhat)[r * static_cast<std::size_t>(c) + j] = xh;
            out[r * static_cast<std::size_t>(c) + j] = xh * pg[j] + pb[j];
        }
    }
    Tape* tape = common_tape({&x, &gain, &bias});
    if (!tape) return Tensor::from(x.shape(), std::move(out));
    const int nx = x.node(), ng = gain.node(), nb = bias.node();
    auto sg = gain.storage();
    return tape->make(x.shape(), std::move(out), {nx, ng, nb},
                      [=](Tape& t, const std::vector<double>& g) {
                          const double* G = sg->data();
                          for (std::size_t r = 0; r < rows; ++r) {
                              const std::size_t base = r * static_cast<std::size_t>(c);
                              if (ng >= 0) {
                                  std::vector<double>& dg = t.grad_buf(ng);
                                  for (int j = 0; j < c; ++j)
                                      dg[static_cast<std::size_t>(j)] += g[base + j] * (*xhat)[base + j];
                              }
                              if (nb >= 0) {
                                  std::vector<double>& db = t.grad_buf(nb);
                                  for (int j = 0; j < c; ++j) db[static_cast<std::size_t>(j)] += g[base + j];
                              }
                              if (nx >= 0) {
                                  std::vector<double>& dx = t.grad_buf(nx);
                                  double mean_gh = 0.0, mean_ghx = 0.0;
                                  for (int j = 0; j < c; ++j) {
                                      const double gh = g[base + j] * G[j];
                                      mean_gh += gh;
                                      mean_ghx += gh * (*xhat)[base + j];
                                  }
                                  mean_gh /= c;
                                  mean_ghx /= c;
                                  const double istd = (*inv_std)[r];
                                  for (int j = 0; j < c; ++j) {
                                      const double gh = g[base + j] * G[j];
                                      dx[base + j] += istd * (gh - mean_gh - (*xhat)[base + j] * mean_ghx);
                                  }
                              }
                          }
                      });
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    Tape* tape = common_tape({&a, &b});
    if (!tape) return Tensor::from(a.shape(), std::move(out));
    const int na = a.node(), nb = b.node();
    return tape->make(a.shape(), std::move(out), {na, nb},
                      [=](Tape& t, const std::vector<double>& g) {
                          if (na >= 0) accumulate(t.grad_buf(na), g);
                          if (nb >= 0) accumulate(t.grad_buf(nb), g);
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    Tape* tape = common_tape({&a, &b});
    if (!tape) return Tensor::from(a.shape(), std::move(out));
    const int na = a.node(), nb = b.node();
    auto sa = a.storage(), sb = b.storage();
    return tape->make(a.shape(), std::move(out), {na, nb},
                      [=](Tape& t, const std::vector<double>& g) {
                          if (na >= 0) {
                              std::vector<double>& da = t.grad_buf(na);
                              for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*sb)[i];
                          }
                          if (nb >= 0) {
                              std::vector<double>& db = t.grad_buf(nb);
                              for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*sa)[i];
                          }
                      });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] / pb[i];
    Tape* tape = common_tape({&a, &b});
    if (!tape) return Tensor::from(a.shape(), std::move(out));
    const int na = a.node(), nb = b.node();
    auto sa = a.storage(), sb = b.storage();
    return tape->make(a.shape(), std::move(out), {na, nb},
                      [=](Tape& t, const std::vector<double>& g) {
                          if (na >= 0) {
                              std::vector<double>& da = t.grad_buf(na);
                              for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / (*sb)[i];
                          }
                          if (nb >= 0) {
                              std::vector<double>& db = t.grad_buf(nb);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  db[i] -= g[i] * (*sa)[i] / ((*sb)[i] * (*sb)[i]);
                          }
                      });
}

Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    const double* p = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] * s;
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from(x.shape(), std::move(out));
    const int nx = x.node();
    return tape->make(x.shape(), std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * s;
                      });
}

Tensor gelu(const Tensor& x) {
    // tanh approximation; the derivative below is of this same formula.
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    constexpr double a = 0.044715;
    std::vector<double> out(x.size());
    const double* p = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = p[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(k * (v + a * v * v * v)));
    }
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from(x.shape(), std::move(out));
    const int nx = x.node();
    auto sx = x.storage();
    return tape->make(x.shape(), std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                              const double v = (*sx)[i];
                              const double u = k * (v + a * v * v * v);
                              const double th = std::tanh(u);
                              const double d =
                                  0.5 * (1.0 + th) +
                                  0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * a * v * v);
                              dx[i] += g[i] * d;
                          }
                      });
}

Tensor log(const Tensor& x) {
    std::vector<double> out(x.size());
    const double* p = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(p[i]);
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from(x.shape(), std::move(out));
    const int nx = x.node();
    auto sx = x.storage();
    return tape->make(x.shape(), std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / (*sx)[i];
                      });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.cols())
        throw DimensionError("add_rowwise: " + shape_str(x.shape()) + " + " +
                             shape_str(bias.shape()));
    const int r = x.rows(), c = x.cols();
    std::vector<double> out(x.size());
    const double* px = x.data();
    const double* pb = bias.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(i) * c + j] = px[static_cast<std::size_t>(i) * c + j] + pb[j];
    Tape* tape = common_tape({&x, &bias});
    if (!tape) return Tensor::from(x.shape(), std::move(out));
    const int nx = x.node(), nb = bias.node();
    return tape->make(x.shape(), std::move(out), {nx, nb},
                      [=](Tape& t, const std::vector<double>& g) {
                          if (nx >= 0) accumulate(t.grad_buf(nx), g);
                          if (nb >= 0) {
                              std::vector<double>& db = t.grad_buf(nb);
                              for (int i = 0; i < r; ++i)
                                  for (int j = 0; j < c; ++j)
                                      db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * c + j];
                          }
                      });
}

Tensor concat(int axis, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    if (axis != 0 && axis != 1) throw DimensionError("concat supports axes 0 and 1");
    const int c_fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2) throw DimensionError("concat expects rank-2 tensors");
        const int fixed = axis == 0 ? p.cols() : p.rows();
        if (fixed != c_fixed)
            throw DimensionError("concat: mismatched shapes " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
        total += axis == 0 ? p.rows() : p.cols();
    }
    const int out_r = axis == 0 ? total : c_fixed;
    const int out_c = axis == 0 ? c_fixed : total;
    std::vector<double> out(static_cast<std::size_t>(out_r) * out_c);
    int off = 0;
    for (const Tensor& p : parts) {
        const double* src = p.data();
        if (axis == 0) {
            std::copy(src, src + p.size(), out.begin() + static_cast<std::ptrdiff_t>(off) * out_c);
            off += p.rows();
        } else {
            for (int i = 0; i < out_r; ++i)
                std::copy(src + static_cast<std::size_t>(i) * p.cols(),
                          src + static_cast<std::size_t>(i + 1) * p.cols(),
                          out.begin() + static_cast<std::ptrdiff_t>(i) * out_c + off);
            off += p.cols();
        }
    }
    std::vector<const Tensor*> refs;
    for (const Tensor& p : parts) refs.push_back(&p);
    Tape* tape = nullptr;
    for (const Tensor* p : refs) {
        if (!p->on_tape()) continue;
        if (tape && tape != p->tape())
            throw ContractError("operands belong to two different gradient tapes");
        tape = p->tape();
    }
    if (!tape) return Tensor::from({out_r, out_c}, std::move(out));

    struct Piece { int node; int offset; int extent; int width; };
    std::vector<Piece> pieces;
    off = 0;
    for (const Tensor& p : parts) {
        const int extent = axis == 0 ? p.rows() : p.cols();
        pieces.push_back(Piece{p.node(), off, extent, axis == 0 ? p.cols() : p.rows()});
        off += extent;
    }
    std::vector<int> parent_ids;
    for (const Piece& pc : pieces) parent_ids.push_back(pc.node);
    return tape->make({out_r, out_c}, std::move(out), parent_ids,
                      [=](Tape& t, const std::vector<double>& g) {
                          for (const Piece& pc : pieces) {
                              if (pc.node < 0) continue;
                              std::vector<double>& dp = t.grad_buf(pc.node);
                              if (axis == 0) {
                                  const std::size_t base =
                                      static_cast<std::size_t>(pc.offset) * out_c;
                                  for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += g[base + i];
                              } else {
                                  for (int i = 0; i < out_r; ++i)
                                      for (int j = 0; j < pc.extent; ++j)
                                          dp[static_cast<std::size_t>(i) * pc.extent + j] +=
                                              g[static_cast<std::size_t>(i) * out_c + pc.offset + j];
                              }
                          }
                      });
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes) {
    if (x.rank() != 2) throw DimensionError("split expects rank 2, got " + shape_str(x.shape()));
    if (axis != 0 && axis != 1) throw DimensionError("split supports axes 0 and 1");
    int total = 0;
    for (int s : sizes) {
        if (s <= 0) throw DimensionError("split: sizes must be positive");
        total += s;
    }
    const int extent = axis == 0 ? x.rows() : x.cols();
    if (total != extent)
        throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                             std::to_string(extent));
    Tape* tape = common_tape({&x});
    const int nx = x.node();
    const int R = x.rows(), C = x.cols();
    std::vector<Tensor> outs;
    int off = 0;
    for (int s : sizes) {
        const int pr = axis == 0 ? s : R;
        const int pc = axis == 0 ? C : s;
        std::vector<double> vals(static_cast<std::size_t>(pr) * pc);
        const double* src = x.data();
        if (axis == 0) {
            std::copy(src + static_cast<std::size_t>(off) * C,
                      src + static_cast<std::size_t>(off + s) * C, vals.begin());
        } else {
            for (int i = 0; i < R; ++i)
                std::copy(src + static_cast<std::size_t>(i) * C + off,
                          src + static_cast<std::size_t>(i) * C + off + s,
                          vals.begin() + static_cast<std::ptrdiff_t>(i) * s);
        }
        if (!tape) {
            outs.push_back(Tensor::from({pr, pc}, std::move(vals)));
        } else {
            const int o = off;
            outs.push_back(tape->make(
                {pr, pc}, std::move(vals), {nx},
                [=](Tape& t, const std::vector<double>& g) {
                    std::vector<double>& dx = t.grad_buf(nx);
                    if (axis == 0) {
                        const std::size_t base = static_cast<std::size_t>(o) * C;
                        for (std::size_t i = 0; i < g.size(); ++i) dx[base + i] += g[i];
                    } else {
                        for (int i = 0; i < R; ++i)
                            for (int j = 0; j < s; ++j)
                                dx[static_cast<std::size_t>(i) * C + o + j] +=
                                    g[static_cast<std::size_t>(i) * s + j];
                    }
                }));
        }
        off += s;
    }
    return outs;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
    if (shape_size(new_shape) != x.size())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    std::vector<double> out(x.data(), x.data() + x.size());
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from(std::move(new_shape), std::move(out));
    const int nx = x.node();
    return tape->make(std::move(new_shape), std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          accumulate(t.grad_buf(nx), g);
                      });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
    if (x.rank() < 2) throw DimensionError("gather_rows expects rank >= 2");
    const int R = x.rows();
    const std::size_t width = x.size() / static_cast<std::size_t>(R);
    for (int idx : indices)
        if (idx < 0 || idx >= R)
            throw BoundsError("gather_rows: index " + std::to_string(idx) +
                              " out of range [0," + std::to_string(R) + ")");
    std::vector<int> out_shape = x.shape();
    out_shape[0] = static_cast<int>(indices.size());
    std::vector<double> out(width * indices.size());
    const double* src = x.data();
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(src + static_cast<std::size_t>(indices[i]) * width,
                  src + (static_cast<std::size_t>(indices[i]) + 1) * width,
                  out.begin() + static_cast<std::ptrdiff_t>(i * width));
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::from(std::move(out_shape), std::move(out));
    const int nx = x.node();
    auto idxs = std::make_shared<std::vector<int>>(indices);
    return tape->make(std::move(out_shape), std::move(out), {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          for (std::size_t i = 0; i < idxs->size(); ++i) {
                              const std::size_t src_off = i * width;
                              const std::size_t dst_off =
                                  static_cast<std::size_t>((*idxs)[i]) * width;
                              for (std::size_t j = 0; j < width; ++j)
                                  dx[dst_off + j] += g[src_off + j];
                          }
                      });
}

Tensor scatter_rows(const Tensor& base, const std::vector<int>& indices, const Tensor& rows) {
    if (base.rank() < 2 || rows.rank() < 2)
        throw DimensionError("scatter_rows expects rank >= 2 operands");
    const int R = base.rows();
    const std::size_t width = base.size() / static_cast<std::size_t>(R);
    if (rows.size() / static_cast<std::size_t>(rows.rows()) != width ||
        rows.rows() != static_cast<int>(indices.size()))
        throw DimensionError("scatter_rows: rows " + shape_str(rows.shape()) +
                             " do not match base " + shape_str(base.shape()) + " with " +
                             std::to_string(indices.size()) + " indices");
    std::vector<char> used(static_cast<std::size_t>(R), 0);
    for (int idx : indices) {
        if (idx < 0 || idx >= R)
            throw BoundsError("scatter_rows: index " + std::to_string(idx) +
                              " out of range [0," + std::to_string(R) + ")");
        if (used[static_cast<std::size_t>(idx)])
            throw ContractError("scatter_rows: duplicate index " + std::to_string(idx));
        used[static_cast<std::size_t>(idx)] = 1;
    }
    std::vector<double> out(base.data(), base.data() + base.size());
    const double* src = rows.data();
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(src + i * width, src + (i + 1) * width,
                  out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(indices[i]) * width));
    Tape* tape = common_tape({&base, &rows});
    if (!tape) return Tensor::from(base.shape(), std::move(out));
    const int nb = base.node(), nr = rows.node();
    auto idxs = std::make_shared<std::vector<int>>(indices);
    return tape->make(base.shape(), std::move(out), {nb, nr},
                      [=](Tape& t, const std::vector<double>& g) {
                          if (nb >= 0) {
                              std::vector<double>& db = t.grad_buf(nb);
                              std::vector<char> overwritten(static_cast<std::size_t>(R), 0);
                              for (int idx : *idxs) overwritten[static_cast<std::size_t>(idx)] = 1;
                              for (int r = 0; r < R; ++r) {
                                  if (overwritten[static_cast<std::size_t>(r)]) continue;
                                  const std::size_t off = static_cast<std::size_t>(r) * width;
                                  for (std::size_t j = 0; j < width; ++j) db[off + j] += g[off + j];
                              }
                          }
                          if (nr >= 0) {
                              std::vector<double>& dr = t.grad_buf(nr);
                              for (std::size_t i = 0; i < idxs->size(); ++i) {
                                  const std::size_t off =
                                      static_cast<std::size_t>((*idxs)[i]) * width;
                                  for (std::size_t j = 0; j < width; ++j)
                                      dr[i * width + j] += g[off + j];
                              }
                          }
                      });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    const double* p = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += p[i];
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::scalar(s);
    const int nx = x.node();
    const std::size_t n = x.size();
    return tape->make({1}, {s}, {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          for (std::size_t i = 0; i < n; ++i) dx[i] += g[0];
                      });
}

Tensor mean(const Tensor& x) {
    const std::size_t n = x.size();
    double s = 0.0;
    const double* p = x.data();
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    s /= static_cast<double>(n);
    Tape* tape = common_tape({&x});
    if (!tape) return Tensor::scalar(s);
    const int nx = x.node();
    return tape->make({1}, {s}, {nx},
                      [=](Tape& t, const std::vector<double>& g) {
                          std::vector<double>& dx = t.grad_buf(nx);
                          const double gv = g[0] / static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i) dx[i] += gv;
                      });
}

} // namespace fine
