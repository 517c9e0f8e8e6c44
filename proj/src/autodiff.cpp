#include "unifuse/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "unifuse/error.hpp"

namespace unifuse {

// ---------------------------------------------------------------- parameters

Parameter& ParameterSet::add(std::string name, std::size_t rows, std::size_t cols, bool trainable) {
    if (find(name) != nullptr) throw ConfigError("duplicate parameter '" + name + "'");
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = Tensor2(rows, cols);
    p->trainable = trainable;
    p->index = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter* ParameterSet::find(std::string_view name) noexcept {
    for (auto& p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

const Parameter* ParameterSet::find(std::string_view name) const noexcept {
    for (const auto& p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

Parameter& ParameterSet::at(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterSet::at(std::string_view name) const {
    if (const auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

std::size_t ParameterSet::scalar_count(bool trainable_only) const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (!trainable_only || p->trainable) n += p->value.size();
    }
    return n;
}

void ParameterSet::set_trainable_prefix(std::string_view prefix, bool trainable) {
    for (auto& p : params_) {
        if (p->name.starts_with(prefix)) p->trainable = trainable;
    }
}

Gradients::Gradients(const ParameterSet& params) {
    grads_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        grads_.emplace_back(params[i].value.rows(), params[i].value.cols());
    }
    touched_.assign(params.size(), 0);
}

void Gradients::zero() {
    for (auto& g : grads_) g.fill(0.0);
    std::fill(touched_.begin(), touched_.end(), std::uint8_t{0});
}

void Gradients::add(const Gradients& other) {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
        auto dst = grads_[i].flat();
        auto src = other.grads_[i].flat();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        touched_[i] |= other.touched_[i];
    }
}

void Gradients::scale(double s) {
    for (auto& g : grads_) {
        for (double& v : g.flat()) v *= s;
    }
}

double Gradients::global_norm() const {
    double sq = 0.0;
    for (const auto& g : grads_) {
        for (double v : g.flat()) sq += v * v;
    }
    return std::sqrt(sq);
}

// ---------------------------------------------------------------------- tape

const Tensor2& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor2 value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
    Node n;
    n.param = &p;
    n.needs_grad = grad_enabled_ && p.trainable;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor2 value, std::vector<std::size_t> parents, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by op node " + std::to_string(size()));
    Node n;
    n.owned = std::move(value);
    n.needs_grad = std::any_of(parents.begin(), parents.end(), [&](std::size_t p) { return nodes_[p].needs_grad; });
    n.parents = std::move(parents);
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

const Tensor2& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param != nullptr ? n.param->value : n.owned;
}

Tensor2& Tape::grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) {
        const Tensor2& v = value(id);
        n.grad = Tensor2(v.rows(), v.cols());
    }
    return n.grad;
}

void Tape::backward(Var root, Gradients& out, double seed) {
    const Tensor2& rv = value(root.id);
    if (rv.rows() != 1 || rv.cols() != 1) throw DimensionError("backward: root must be 1x1, got " + rv.shape_string());
    if (!nodes_[root.id].needs_grad) return;
    grad(root.id)(0, 0) += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.param != nullptr) {
            out.mark_touched(n.param->index);
            Tensor2& dst = out[n.param->index];
            auto d = dst.flat();
            auto s = n.grad.flat();
            for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
        } else if (n.backward) {
            n.backward(*this, i);
        }
    }
}

// ----------------------------------------------------------------------- ops

namespace ops {

namespace {

void require_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw ConfigError("ops: operands recorded on different tapes");
}

void add_into(Tensor2& dst, const Tensor2& src) {
    auto d = dst.flat();
    auto s = src.flat();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
    require_same_tape(a, b);
    const Tensor2& av = a.value();
    const Tensor2& bv = b.value();
    if (av.cols() != bv.rows()) throw DimensionError("matmul: " + av.shape_string() + " * " + bv.shape_string());
    Tensor2 out(av.rows(), bv.cols());
    kernels::gemm_nn_acc(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.cols());
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        const Tensor2& A = t.value(ia);
        const Tensor2& B = t.value(ib);
        if (t.needs_grad(ia)) kernels::gemm_nt_acc(g.data(), B.data(), t.grad(ia).data(), A.rows(), B.cols(), A.cols());
        if (t.needs_grad(ib)) kernels::gemm_tn_acc(A.data(), g.data(), t.grad(ib).data(), A.rows(), A.cols(), B.cols());
    });
}

Var matmul_nt(Var a, Var b) {
    require_same_tape(a, b);
    const Tensor2& av = a.value();
    const Tensor2& bv = b.value();
    if (av.cols() != bv.cols()) throw DimensionError("matmul_nt: " + av.shape_string() + " * (" + bv.shape_string() + ")^T");
    Tensor2 out(av.rows(), bv.rows());
    kernels::gemm_nt_acc(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.rows());
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);  // m x n
        const Tensor2& A = t.value(ia);   // m x k
        const Tensor2& B = t.value(ib);   // n x k
        if (t.needs_grad(ia)) kernels::gemm_nn_acc(g.data(), B.data(), t.grad(ia).data(), A.rows(), B.rows(), A.cols());
        if (t.needs_grad(ib)) kernels::gemm_tn_acc(g.data(), A.data(), t.grad(ib).data(), A.rows(), B.rows(), A.cols());
    });
}

Var add(Var a, Var b) {
    require_same_tape(a, b);
    const Tensor2& av = a.value();
    const Tensor2& bv = b.value();
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
        throw DimensionError("add: " + av.shape_string() + " + " + bv.shape_string());
    }
    Tensor2 out = av;
    add_into(out, bv);
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        if (t.needs_grad(ia)) add_into(t.grad(ia), g);
        if (t.needs_grad(ib)) add_into(t.grad(ib), g);
    });
}

Var scale(Var x, double s) {
    Tensor2 out = x.value();
    for (double& v : out.flat()) v *= s;
    const std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, s](Tape& t, std::size_t self) {
        auto g = t.grad(self).flat();
        auto d = t.grad(ix).flat();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
    });
}

Var affine(Var x, Var weights, Var bias) {
    require_same_tape(x, weights);
    require_same_tape(x, bias);
    const Tensor2& xv = x.value();
    const Tensor2& wv = weights.value();
    const Tensor2& bv = bias.value();
    if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
        throw DimensionError("affine: x " + xv.shape_string() + ", W " + wv.shape_string() + ", b " +
                             bv.shape_string());
    }
    Tensor2 out(xv.rows(), wv.cols());
    for (std::size_t r = 0; r < out.rows(); ++r) std::copy(bv.data(), bv.data() + bv.cols(), out.row(r).data());
    kernels::gemm_nn_acc(xv.data(), wv.data(), out.data(), xv.rows(), xv.cols(), wv.cols());
    const std::size_t ix = x.id;
    const std::size_t iw = weights.id;
    const std::size_t ib = bias.id;
    return x.tape->record(std::move(out), {ix, iw, ib}, [ix, iw, ib](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        const Tensor2& X = t.value(ix);
        const Tensor2& W = t.value(iw);
        if (t.needs_grad(ix)) kernels::gemm_nt_acc(g.data(), W.data(), t.grad(ix).data(), X.rows(), W.cols(), X.cols());
        if (t.needs_grad(iw)) kernels::gemm_tn_acc(X.data(), g.data(), t.grad(iw).data(), X.rows(), X.cols(), W.cols());
        if (t.needs_grad(ib)) {
            Tensor2& db = t.grad(ib);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) db(0, c) += g(r, c);
            }
        }
    });
}

Var gelu(Var x) {
    Tensor2 out = x.value();
    for (double& v : out.flat()) v = kernels::gelu(v);
    const std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
        auto g = t.grad(self).flat();
        auto xv = t.value(ix).flat();
        auto d = t.grad(ix).flat();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * kernels::gelu_grad(xv[i]);
    });
}

Var layer_norm(Var x, Var gain, Var shift, double eps) {
    require_same_tape(x, gain);
    require_same_tape(x, shift);
    const Tensor2& xv = x.value();
    const std::size_t d = xv.cols();
    if (gain.rows() != 1 || gain.cols() != d || shift.rows() != 1 || shift.cols() != d) {
        throw DimensionError("layer_norm: x " + xv.shape_string() + ", gain " + gain.value().shape_string() +
                             ", shift " + shift.value().shape_string());
    }
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    const Tensor2& gv = gain.value();
    const Tensor2& sv = shift.value();
    Tensor2 out(xv.rows(), d);
    auto normed = std::make_shared<Tensor2>(xv.rows(), d);
    auto inv_std = std::make_shared<std::vector<double>>(xv.rows());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        auto row = xv.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < d; ++c) {
            const double n = (row[c] - mean) * is;
            (*normed)(r, c) = n;
            out(r, c) = n * gv(0, c) + sv(0, c);
        }
    }
    const std::size_t ix = x.id;
    const std::size_t ig = gain.id;
    const std::size_t is = shift.id;
    return x.tape->record(std::move(out), {ix, ig, is}, [ix, ig, is, normed, inv_std](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        const Tensor2& G = t.value(ig);
        const std::size_t rows = g.rows();
        const std::size_t d = g.cols();
        if (t.needs_grad(ig) || t.needs_grad(is)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    if (t.needs_grad(ig)) t.grad(ig)(0, c) += g(r, c) * (*normed)(r, c);
                    if (t.needs_grad(is)) t.grad(is)(0, c) += g(r, c);
                }
            }
        }
        if (t.needs_grad(ix)) {
            Tensor2& dx = t.grad(ix);
            std::vector<double> dn(d);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_dn = 0.0;
                double mean_dn_n = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dn[c] = g(r, c) * G(0, c);
                    mean_dn += dn[c];
                    mean_dn_n += dn[c] * (*normed)(r, c);
                }
                mean_dn /= static_cast<double>(d);
                mean_dn_n /= static_cast<double>(d);
                for (std::size_t c = 0; c < d; ++c) {
                    dx(r, c) += (*inv_std)[r] * (dn[c] - mean_dn - (*normed)(r, c) * mean_dn_n);
                }
            }
        }
    });
}

Var conv1d(Var x, Var weights, Var bias, std::size_t kernel, std::size_t stride, std::string_view what) {
    require_same_tape(x, weights);
    require_same_tape(x, bias);
    const Tensor2& xv = x.value();
    const Tensor2& wv = weights.value();
    const Tensor2& bv = bias.value();
    if (kernel < 1 || stride < 1) throw ConfigError(std::string(what) + ": kernel and stride must be >= 1");
    const std::size_t c_in = xv.cols();
    if (wv.rows() != kernel * c_in || bv.rows() != 1 || bv.cols() != wv.cols()) {
        throw DimensionError(std::string(what) + ": x " + xv.shape_string() + ", weights " + wv.shape_string() +
                             ", bias " + bv.shape_string() + ", kernel " + std::to_string(kernel));
    }
    if (xv.rows() < kernel) {
        throw LengthError(std::string(what) + ": input has " + std::to_string(xv.rows()) +
                          " frames, kernel needs at least " + std::to_string(kernel));
    }
    const std::size_t t_out = (xv.rows() - kernel) / stride + 1;
    const std::size_t c_out = wv.cols();
    // Output row r reads input rows [r*stride, r*stride + kernel), which are
    // contiguous in memory: a window is one (kernel*c_in)-vector.
    const std::size_t win = kernel * c_in;
    auto windows = std::make_shared<Tensor2>(t_out, win);
    for (std::size_t r = 0; r < t_out; ++r) {
        std::copy_n(xv.data() + r * stride * c_in, win, windows->row(r).data());
    }
    Tensor2 out(t_out, c_out);
    for (std::size_t r = 0; r < t_out; ++r) std::copy(bv.data(), bv.data() + c_out, out.row(r).data());
    kernels::gemm_nn_acc(windows->data(), wv.data(), out.data(), t_out, win, c_out);
    const std::size_t ix = x.id;
    const std::size_t iw = weights.id;
    const std::size_t ib = bias.id;
    return x.tape->record(std::move(out), {ix, iw, ib}, [ix, iw, ib, stride, windows](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        const Tensor2& W = t.value(iw);
        const std::size_t c_out = W.cols();
        const std::size_t win = windows->cols();
        const std::size_t c_in = t.value(ix).cols();
        if (t.needs_grad(ix)) {
            Tensor2 dwin(g.rows(), win);
            kernels::gemm_nt_acc(g.data(), W.data(), dwin.data(), g.rows(), c_out, win);
            double* dx = t.grad(ix).data();
            for (std::size_t r = 0; r < g.rows(); ++r) {
                double* dst = dx + r * stride * c_in;
                const double* src = dwin.row(r).data();
                for (std::size_t q = 0; q < win; ++q) dst[q] += src[q];
            }
        }
        if (t.needs_grad(iw)) kernels::gemm_tn_acc(windows->data(), g.data(), t.grad(iw).data(), g.rows(), win, c_out);
        if (t.needs_grad(ib)) {
            double* db = t.grad(ib).data();
            for (std::size_t r = 0; r < g.rows(); ++r) {
                const double* gr = g.row(r).data();
                for (std::size_t c = 0; c < c_out; ++c) db[c] += gr[c];
            }
        }
    });
}

Var edge_extend(Var x, std::size_t n) {
    const Tensor2& xv = x.value();
    if (xv.rows() == 0) throw LengthError("edge_extend: empty input");
    const std::size_t rows = xv.rows();
    Tensor2 out(rows + 2 * n, xv.cols());
    for (std::size_t r = 0; r < out.rows(); ++r) {
        const std::size_t src = r < n ? 0 : (r - n >= rows ? rows - 1 : r - n);
        std::copy(xv.row(src).begin(), xv.row(src).end(), out.row(r).begin());
    }
    const std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, n, rows](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        Tensor2& dx = t.grad(ix);
        for (std::size_t r = 0; r < g.rows(); ++r) {
            const std::size_t src = r < n ? 0 : (r - n >= rows ? rows - 1 : r - n);
            for (std::size_t c = 0; c < g.cols(); ++c) dx(src, c) += g(r, c);
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    std::vector<std::size_t> ids;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p);
        if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
        cols += p.cols();
        ids.push_back(p.id);
    }
    Tensor2 out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor2& v = p.value();
        for (std::size_t r = 0; r < rows; ++r) std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + off);
        off += v.cols();
    }
    auto parents = ids;
    return parts[0].tape->record(std::move(out), std::move(parents), [ids](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t id : ids) {
            const std::size_t w = t.value(id).cols();
            if (t.needs_grad(id)) {
                Tensor2& d = t.grad(id);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < w; ++c) d(r, c) += g(r, off + c);
                }
            }
            off += w;
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    std::vector<std::size_t> ids;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p);
        if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
        rows += p.rows();
        ids.push_back(p.id);
    }
    Tensor2 out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor2& v = p.value();
        std::copy(v.data(), v.data() + v.size(), out.data() + off * cols);
        off += v.rows();
    }
    auto parents = ids;
    return parts[0].tape->record(std::move(out), std::move(parents), [ids](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t id : ids) {
            const std::size_t n = t.value(id).size();
            if (t.needs_grad(id)) {
                auto d = t.grad(id).flat();
                for (std::size_t i = 0; i < n; ++i) d[i] += g.data()[off + i];
            }
            off += n;
        }
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    const Tensor2& xv = x.value();
    if (begin > end || end > xv.rows()) {
        throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                             xv.shape_string());
    }
    const std::size_t ix = x.id;
    return x.tape->record(unifuse::slice_rows(xv, begin, end), {ix}, [ix, begin](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        Tensor2& d = t.grad(ix);
        double* dst = d.data() + begin * d.cols();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g.data()[i];
    });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
    const Tensor2& tv = table.value();
    Tensor2 out(ids.size(), tv.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= tv.rows()) {
            throw DimensionError("gather_rows: index " + std::to_string(ids[r]) + " outside table " + tv.shape_string());
        }
        std::copy(tv.row(ids[r]).begin(), tv.row(ids[r]).end(), out.row(r).begin());
    }
    const std::size_t it = table.id;
    std::vector<std::size_t> rows(ids.begin(), ids.end());
    return table.tape->record(std::move(out), {it}, [it, rows = std::move(rows)](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        Tensor2& d = t.grad(it);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) d(rows[r], c) += g(r, c);
        }
    });
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
    const std::size_t whole[] = {q.rows()};
    return causal_attention(q, k, v, n_heads, whole);
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> segments) {
    require_same_tape(q, k);
    require_same_tape(q, v);
    const Tensor2& Q = q.value();
    const Tensor2& K = k.value();
    const Tensor2& V = v.value();
    const std::size_t T = Q.rows();
    const std::size_t D = Q.cols();
    if (n_heads == 0 || D % n_heads != 0) {
        throw ConfigError("causal_attention: width " + std::to_string(D) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    if (K.rows() != T || V.rows() != T || K.cols() != D || V.cols() != D) {
        throw DimensionError("causal_attention: q " + Q.shape_string() + ", k " + K.shape_string() + ", v " +
                             V.shape_string());
    }
    // starts[s] is the first row of segment s; tri[s] the offset of its packed
    // lower-triangular probability block (per head).
    auto starts = std::make_shared<std::vector<std::size_t>>();
    auto tri = std::make_shared<std::vector<std::size_t>>();
    std::size_t rows = 0;
    std::size_t packed = 0;
    for (std::size_t n : segments) {
        starts->push_back(rows);
        tri->push_back(packed);
        rows += n;
        packed += n * (n + 1) / 2;
    }
    if (rows != T) {
        throw DimensionError("causal_attention: segments cover " + std::to_string(rows) + " rows, inputs have " +
                             std::to_string(T));
    }
    starts->push_back(rows);
    const std::size_t dh = D / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<double>>(n_heads * packed);
    Tensor2 out(T, D);
    for (std::size_t s = 0; s + 1 < starts->size(); ++s) {
        const std::size_t b = (*starts)[s];
        const std::size_t n = (*starts)[s + 1] - b;
        for (std::size_t h = 0; h < n_heads; ++h) {
            double* P = probs->data() + h * packed + (*tri)[s];
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                double* Pi = P + i * (i + 1) / 2;
                const double* qi = Q.data() + (b + i) * D + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = K.data() + (b + j) * D + off;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    Pi[j] = acc * inv_sqrt;
                    mx = std::max(mx, Pi[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    Pi[j] = std::exp(Pi[j] - mx);
                    z += Pi[j];
                }
                double* oi = out.data() + (b + i) * D + off;
                for (std::size_t j = 0; j <= i; ++j) {
                    Pi[j] /= z;
                    const double p = Pi[j];
                    const double* vj = V.data() + (b + j) * D + off;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
                }
            }
        }
    }
    const std::size_t iq = q.id;
    const std::size_t ik = k.id;
    const std::size_t iv = v.id;
    return q.tape->record(std::move(out), {iq, ik, iv},
                          [iq, ik, iv, n_heads, dh, inv_sqrt, packed, probs, starts, tri](Tape& t, std::size_t self) {
        const Tensor2& g = t.grad(self);
        const Tensor2& Q = t.value(iq);
        const Tensor2& K = t.value(ik);
        const Tensor2& V = t.value(iv);
        const std::size_t D = Q.cols();
        double* dQ = t.needs_grad(iq) ? t.grad(iq).data() : nullptr;
        double* dK = t.needs_grad(ik) ? t.grad(ik).data() : nullptr;
        double* dV = t.needs_grad(iv) ? t.grad(iv).data() : nullptr;
        std::vector<double> dp;
        for (std::size_t s = 0; s + 1 < starts->size(); ++s) {
            const std::size_t b = (*starts)[s];
            const std::size_t n = (*starts)[s + 1] - b;
            dp.resize(n);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const double* P = probs->data() + h * packed + (*tri)[s];
                const std::size_t off = h * dh;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* Pi = P + i * (i + 1) / 2;
                    const double* gi = g.data() + (b + i) * D + off;
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double* vj = V.data() + (b + j) * D + off;
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                        dp[j] = acc;
                        dot += acc * Pi[j];
                        if (dV != nullptr) {
                            double* dvj = dV + (b + j) * D + off;
                            const double p = Pi[j];
                            for (std::size_t c = 0; c < dh; ++c) dvj[c] += p * gi[c];
                        }
                    }
                    const double* qi = Q.data() + (b + i) * D + off;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = Pi[j] * (dp[j] - dot) * inv_sqrt;
                        if (dQ != nullptr) {
                            const double* kj = K.data() + (b + j) * D + off;
                            double* dqi = dQ + (b + i) * D + off;
                            for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                        }
                        if (dK != nullptr) {
                            double* dkj = dK + (b + j) * D + off;
                            for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
    });
}

Var causal_self_attention(Var x, std::size_t n_heads, const AttentionWeights& w) {
    if (n_heads == 0 || x.cols() % n_heads != 0) {
        throw ConfigError("causal_self_attention: width " + std::to_string(x.cols()) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    const Var q = affine(x, w.wq, w.bq);
    const Var k = affine(x, w.wk, w.bk);
    const Var v = affine(x, w.wv, w.bv);
    return affine(causal_attention(q, k, v, n_heads), w.wo, w.bo);
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> mask,
                          Reduction reduction) {
    const Tensor2& L = logits.value();
    if (targets.size() != L.rows() || mask.size() != L.rows()) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                             std::to_string(mask.size()) + " mask flags for logits " + L.shape_string());
    }
    const std::size_t V = L.cols();
    std::size_t count = 0;
    double total = 0.0;
    auto probs = std::make_shared<Tensor2>(L.rows(), V);
    for (std::size_t r = 0; r < L.rows(); ++r) {
        if (mask[r] == 0) continue;
        if (targets[r] >= V) {
            throw DimensionError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " outside vocab of " +
                                 std::to_string(V));
        }
        auto row = L.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            const double e = std::exp(row[c] - mx);
            (*probs)(r, c) = e;
            z += e;
        }
        for (std::size_t c = 0; c < V; ++c) (*probs)(r, c) /= z;
        total += std::log(z) + mx - row[targets[r]];
        ++count;
    }
    if (count == 0) throw ConfigError("softmax_cross_entropy: no supervised positions");
    const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(count) : 1.0;
    Tensor2 out(1, 1, {total * norm});
    const std::size_t il = logits.id;
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return logits.tape->record(std::move(out), {il},
                               [il, probs, norm, tg = std::move(tg), mk = std::move(mk)](Tape& t, std::size_t self) {
        const double g = t.grad(self)(0, 0) * norm;
        Tensor2& d = t.grad(il);
        for (std::size_t r = 0; r < d.rows(); ++r) {
            if (mk[r] == 0) continue;
            for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) += g * (*probs)(r, c);
            d(r, tg[r]) -= g;
        }
    });
}

Var weighted_sum(Var x, const Tensor2& w) {
    const Tensor2& xv = x.value();
    if (xv.rows() != w.rows() || xv.cols() != w.cols()) {
        throw DimensionError("weighted_sum: " + xv.shape_string() + " vs " + w.shape_string());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += xv.data()[i] * w.data()[i];
    const std::size_t ix = x.id;
    return x.tape->record(Tensor2(1, 1, {s}), {ix}, [ix, w](Tape& t, std::size_t self) {
        const double g = t.grad(self)(0, 0);
        auto d = t.grad(ix).flat();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * w.data()[i];
    });
}

}  // namespace ops

// ---------------------------------------------------------------- grad check

GradReport grad_check(const std::function<double()>& loss_fn, std::span<const GradCheckEntry> params,
                      const GradCheckOptions& options) {
    if (!(options.eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
    GradReport report;
    double worst_score = -1.0;
    for (const auto& entry : params) {
        if (entry.values.size() != entry.analytic.size()) {
            throw DimensionError("grad_check: value/gradient size mismatch for " + entry.name);
        }
        for (std::size_t i = 0; i < entry.values.size(); ++i) {
            const std::string id = entry.name + "[" + std::to_string(i) + "]";
            const double saved = entry.values[i];
            entry.values[i] = saved + options.eps;
            const double up = loss_fn();
            entry.values[i] = saved - options.eps;
            const double down = loss_fn();
            entry.values[i] = saved;
            ++report.checked;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                report.passed = false;
                report.worst_param = id;
                report.max_abs_err = std::numeric_limits<double>::infinity();
                report.max_rel_err = std::numeric_limits<double>::infinity();
                return report;
            }
            const double numeric = (up - down) / (2.0 * options.eps);
            const double analytic = entry.analytic[i];
            const double abs_err = std::abs(numeric - analytic);
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            if (abs_err > options.abs_floor) {
                report.max_rel_err = std::max(report.max_rel_err, rel_err);
                if (rel_err > options.rel_tol) report.passed = false;
            }
            const double score = abs_err > options.abs_floor ? rel_err : 0.0;
            if (score > worst_score || report.worst_param.empty()) {
                worst_score = score;
                report.worst_param = id;
            }
        }
    }
    return report;
}

GradReport grad_check(ParameterSet& params, const std::function<Var(Tape&)>& build, const GradCheckOptions& options) {
    Gradients grads(params);
    {
        Tape tape;
        const Var loss = build(tape);
        tape.backward(loss, grads);
    }
    std::vector<GradCheckEntry> entries;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        entries.push_back({params[i].name, params[i].value.flat(), grads[i].flat()});
    }
    const auto loss_fn = [&]() {
        Tape tape;
        return build(tape).value()(0, 0);
    };
    return grad_check(loss_fn, entries, options);
}

void fill_normal(Tensor2& t, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.flat()) v = dist(rng);
}

}  // namespace unifuse
