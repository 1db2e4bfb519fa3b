#include "qpcnet/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

namespace qpcnet::nn {

namespace {

// Row-major GEMM: C = alpha op(A) op(B) + beta C.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += " x ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
    if (t.shape.size() != rank || t.data.size() != element_count(t.shape)) {
        throw ShapeError(std::string(what) + " must be a rank-" + std::to_string(rank) + " tensor, got " +
                         shape_string(t.shape));
    }
}

// Sample `s` of x [M x L x Cin] unfolded to [L x K*Cin], zero outside [0, L).
template <typename T>
void im2col(const T* x, std::size_t len, std::size_t cin, std::size_t ksize, T* col) {
    const auto pad = static_cast<std::ptrdiff_t>(ksize / 2);
    const std::size_t row = ksize * cin;
    for (std::size_t l = 0; l < len; ++l) {
        T* dst = col + l * row;
        for (std::size_t t = 0; t < ksize; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + t) - pad;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) {
                std::fill_n(dst + t * cin, cin, T{0});
            } else {
                std::copy_n(x + static_cast<std::size_t>(src) * cin, cin, dst + t * cin);
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::size_t len, std::size_t cin, std::size_t ksize, T* dx) {
    const auto pad = static_cast<std::ptrdiff_t>(ksize / 2);
    const std::size_t row = ksize * cin;
    for (std::size_t l = 0; l < len; ++l) {
        const T* src_row = col + l * row;
        for (std::size_t t = 0; t < ksize; ++t) {
            const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(l + t) - pad;
            if (dst < 0 || dst >= static_cast<std::ptrdiff_t>(len)) continue;
            T* out = dx + static_cast<std::size_t>(dst) * cin;
            const T* in = src_row + t * cin;
            for (std::size_t c = 0; c < cin; ++c) out[c] += in[c];
        }
    }
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
    for (T& v : x.data) v = v > T{0} ? v : T{0};
}

template <typename T>
void relu_mask_inplace(const Tensor<T>& out, Tensor<T>& dy) {
    for (std::size_t i = 0; i < dy.size(); ++i) {
        if (!(out[i] > T{0})) dy[i] = T{0};
    }
}

}  // namespace

std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::size_t> extents, T fill)
    : shape(std::move(extents)), data(element_count(shape), fill) {}

// ---- layers ---------------------------------------------------------------

template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
    require_rank(x, 3, "conv input");
    require_rank(kernel, 3, "conv kernel");
    require_rank(bias, 1, "conv bias");
    const std::size_t m = x.dim(0), len = x.dim(1), cin = x.dim(2);
    const std::size_t ksize = kernel.dim(0), cout = kernel.dim(2);
    if (kernel.dim(1) != cin || bias.dim(0) != cout || ksize % 2 == 0) {
        throw ShapeError("conv shapes disagree: input " + shape_string(x.shape) + ", kernel " +
                         shape_string(kernel.shape) + ", bias " + shape_string(bias.shape));
    }
    Tensor<T> out({m, len, cout});
    std::vector<T> col(len * ksize * cin);
    for (std::size_t s = 0; s < m; ++s) {
        T* y = out.data.data() + s * len * cout;
        for (std::size_t l = 0; l < len; ++l) std::copy_n(bias.data.data(), cout, y + l * cout);
        im2col(x.data.data() + s * len * cin, len, cin, ksize, col.data());
        gemm(false, false, len, cout, ksize * cin, T{1}, col.data(), ksize * cin, kernel.data.data(), cout, T{1}, y,
             cout);
    }
    return out;
}

template <typename T>
Tensor<T> conv1d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& dy, Tensor<T>& dkernel,
                          Tensor<T>& dbias, bool want_dx) {
    require_rank(x, 3, "conv input");
    require_rank(kernel, 3, "conv kernel");
    require_rank(dy, 3, "conv output gradient");
    const std::size_t m = x.dim(0), len = x.dim(1), cin = x.dim(2);
    const std::size_t ksize = kernel.dim(0), cout = kernel.dim(2);
    if (kernel.dim(1) != cin || dy.dim(0) != m || dy.dim(1) != len || dy.dim(2) != cout) {
        throw ShapeError("conv backward shapes disagree");
    }
    dkernel = Tensor<T>(kernel.shape);
    dbias = Tensor<T>({cout});
    Tensor<T> dx;
    if (want_dx) dx = Tensor<T>(x.shape);
    const std::size_t row = ksize * cin;
    std::vector<T> col(len * row);
    std::vector<T> dcol(want_dx ? len * row : 0);
    for (std::size_t s = 0; s < m; ++s) {
        const T* g = dy.data.data() + s * len * cout;
        im2col(x.data.data() + s * len * cin, len, cin, ksize, col.data());
        gemm(true, false, row, cout, len, T{1}, col.data(), row, g, cout, T{1}, dkernel.data.data(), cout);
        for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t c = 0; c < cout; ++c) dbias[c] += g[l * cout + c];
        }
        if (want_dx) {
            gemm(false, true, len, row, cout, T{1}, g, cout, kernel.data.data(), cout, T{0}, dcol.data(), row);
            col2im_add(dcol.data(), len, cin, ksize, dx.data.data() + s * len * cin);
        }
    }
    return dx;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = x;
    relu_inplace(out);
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& dy) {
    if (out.shape != dy.shape) throw ShapeError("relu backward shapes disagree");
    Tensor<T> dx = dy;
    relu_mask_inplace(out, dx);
    return dx;
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::uint8_t>* argmax) {
    require_rank(x, 3, "pool input");
    const std::size_t m = x.dim(0), len = x.dim(1), c = x.dim(2);
    if (len % 2 != 0) {
        throw ShapeError("max pooling needs an even length, got " + std::to_string(len));
    }
    const std::size_t half = len / 2;
    Tensor<T> out({m, half, c});
    if (argmax) argmax->assign(out.size(), 0);
    for (std::size_t s = 0; s < m; ++s) {
        for (std::size_t i = 0; i < half; ++i) {
            const T* a = x.data.data() + (s * len + 2 * i) * c;
            const T* b = a + c;
            const std::size_t base = (s * half + i) * c;
            for (std::size_t k = 0; k < c; ++k) {
                const bool second = b[k] > a[k];
                out[base + k] = second ? b[k] : a[k];
                if (argmax) (*argmax)[base + k] = second ? 1 : 0;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& dy, const std::vector<std::uint8_t>& argmax) {
    require_rank(dy, 3, "pool output gradient");
    if (argmax.size() != dy.size()) throw ShapeError("pool backward: argmax does not match gradient");
    const std::size_t m = dy.dim(0), half = dy.dim(1), c = dy.dim(2);
    Tensor<T> dx({m, 2 * half, c});
    for (std::size_t s = 0; s < m; ++s) {
        for (std::size_t i = 0; i < half; ++i) {
            const std::size_t base = (s * half + i) * c;
            for (std::size_t k = 0; k < c; ++k) {
                dx[(s * 2 * half + 2 * i + argmax[base + k]) * c + k] = dy[base + k];
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training, std::vector<T>* scale) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw InvalidParameter("dropout rate must be in [0, 1)");
    }
    Tensor<T> out = x;
    if (!training) {
        if (scale) scale->assign(x.size(), T{1});
        return out;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    if (scale) scale->resize(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T s = rng.uniform() < rate ? T{0} : keep_scale;
        out[i] *= s;
        if (scale) (*scale)[i] = s;
    }
    return out;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    require_rank(x, 2, "dense input");
    require_rank(w, 2, "dense weight");
    require_rank(b, 1, "dense bias");
    const std::size_t m = x.dim(0), f = x.dim(1), u = w.dim(1);
    if (w.dim(0) != f || b.dim(0) != u) {
        throw ShapeError("dense shapes disagree: input " + shape_string(x.shape) + ", weight " +
                         shape_string(w.shape) + ", bias " + shape_string(b.shape));
    }
    Tensor<T> out({m, u});
    for (std::size_t s = 0; s < m; ++s) std::copy_n(b.data.data(), u, out.data.data() + s * u);
    gemm(false, false, m, u, f, T{1}, x.data.data(), f, w.data.data(), u, T{1}, out.data.data(), u);
    return out;
}

template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                         bool want_dx) {
    require_rank(x, 2, "dense input");
    require_rank(dy, 2, "dense output gradient");
    const std::size_t m = x.dim(0), f = x.dim(1), u = w.dim(1);
    if (w.dim(0) != f || dy.dim(0) != m || dy.dim(1) != u) throw ShapeError("dense backward shapes disagree");
    dw = Tensor<T>(w.shape);
    db = Tensor<T>({u});
    gemm(true, false, f, u, m, T{1}, x.data.data(), f, dy.data.data(), u, T{0}, dw.data.data(), u);
    for (std::size_t s = 0; s < m; ++s) {
        for (std::size_t j = 0; j < u; ++j) db[j] += dy[s * u + j];
    }
    Tensor<T> dx;
    if (want_dx) {
        dx = Tensor<T>(x.shape);
        gemm(false, true, m, f, u, T{1}, dy.data.data(), u, w.data.data(), u, T{0}, dx.data.data(), f);
    }
    return dx;
}

template <typename T>
Tensor<T> softmax_heads(const Tensor<T>& logits, std::size_t classes) {
    require_rank(logits, 2, "logits");
    if (classes == 0 || logits.dim(1) != 3 * classes) {
        throw ShapeError("logits width " + std::to_string(logits.dim(1)) + " is not 3 x " + std::to_string(classes));
    }
    const std::size_t m = logits.dim(0);
    Tensor<T> probs({m, 3, classes});
    for (std::size_t row = 0; row < 3 * m; ++row) {
        const T* z = logits.data.data() + row * classes;
        T* p = probs.data.data() + row * classes;
        const T peak = *std::max_element(z, z + classes);
        double sum = 0.0;
        for (std::size_t k = 0; k < classes; ++k) {
            const double e = std::exp(static_cast<double>(z[k] - peak));
            p[k] = static_cast<T>(e);
            sum += e;
        }
        for (std::size_t k = 0; k < classes; ++k) p[k] = static_cast<T>(p[k] / sum);
    }
    return probs;
}

template <typename T>
double cross_entropy(const Tensor<T>& probs, const Tensor<T>& targets) {
    if (probs.shape != targets.shape || probs.shape.empty() || probs.dim(0) == 0) {
        throw ShapeError("cross-entropy shapes disagree: " + shape_string(probs.shape) + " vs " +
                         shape_string(targets.shape));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (targets[i] != T{0}) {
            total -= static_cast<double>(targets[i]) *
                     std::log(std::max(static_cast<double>(probs[i]), kProbabilityFloor));
        }
    }
    return total / static_cast<double>(probs.dim(0));
}

// ---- model ----------------------------------------------------------------

void ModelConfig::validate() const {
    if (input_len == 0 || input_len % 4 != 0) {
        throw InvalidParameter("input length must be a positive multiple of 4, got " + std::to_string(input_len));
    }
    if (kernel == 0 || kernel % 2 == 0) throw InvalidParameter("kernel size must be odd");
    if (conv1_filters == 0 || conv2_filters == 0 || dense_units == 0 || classes == 0) {
        throw InvalidParameter("layer widths must be positive");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw InvalidParameter("dropout rate must be in [0, 1)");
}

const std::array<std::string, kParameterBlocks>& parameter_block_names() {
    static const std::array<std::string, kParameterBlocks> names{
        "conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias",
        "dense.weight", "dense.bias", "head.weight",  "head.bias"};
    return names;
}

template <typename T>
Parameters<T> Parameters<T>::zeros(const ModelConfig& c) {
    c.validate();
    Parameters p;
    p.blocks[0] = Tensor<T>({c.kernel, 1, c.conv1_filters});
    p.blocks[1] = Tensor<T>({c.conv1_filters});
    p.blocks[2] = Tensor<T>({c.kernel, c.conv1_filters, c.conv2_filters});
    p.blocks[3] = Tensor<T>({c.conv2_filters});
    p.blocks[4] = Tensor<T>({c.flat_features(), c.dense_units});
    p.blocks[5] = Tensor<T>({c.dense_units});
    p.blocks[6] = Tensor<T>({c.dense_units, c.logits()});
    p.blocks[7] = Tensor<T>({c.logits()});
    return p;
}

template <typename T>
std::size_t Parameters<T>::count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.size();
    return n;
}

template <typename T>
void Parameters<T>::fill(T value) {
    for (auto& b : blocks) std::fill(b.data.begin(), b.data.end(), value);
}

template <typename T>
bool Parameters<T>::congruent(const Parameters& other) const {
    for (std::size_t i = 0; i < kParameterBlocks; ++i) {
        if (blocks[i].shape != other.blocks[i].shape) return false;
    }
    return true;
}

template <typename T>
Network<T>::Network(const ModelConfig& config) : config_(config), params_(Parameters<T>::zeros(config)) {}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
    Rng rng(seed);
    const auto fill = [&](Tensor<T>& w, double stddev) {
        for (T& v : w.data) v = static_cast<T>(stddev * rng.normal());
    };
    fill(params_.conv1_kernel(), std::sqrt(2.0 / static_cast<double>(config_.kernel)));
    fill(params_.conv2_kernel(), std::sqrt(2.0 / static_cast<double>(config_.kernel * config_.conv1_filters)));
    fill(params_.dense_weight(), std::sqrt(2.0 / static_cast<double>(config_.flat_features())));
    fill(params_.head_weight(), 0.1 * std::sqrt(1.0 / static_cast<double>(config_.dense_units)));
    for (std::size_t b : {1u, 3u, 5u, 7u}) {
        std::fill(params_.blocks[b].data.begin(), params_.blocks[b].data.end(), T{0});
    }
    cache_.reset();
}

template <typename T>
Tensor<T> Network<T>::forward_core(const Tensor<T>& input, bool training, std::uint64_t dropout_seed,
                                   ForwardCache<T>* cache) const {
    const std::size_t m = input.dim(0);
    const ModelConfig& c = config_;

    Tensor<T> conv1 = conv1d_forward(input, params_.conv1_kernel(), params_.conv1_bias());
    relu_inplace(conv1);
    std::vector<std::uint8_t> arg1;
    Tensor<T> pool1 = maxpool2(conv1, cache ? &arg1 : nullptr);

    Tensor<T> conv2 = conv1d_forward(pool1, params_.conv2_kernel(), params_.conv2_bias());
    relu_inplace(conv2);
    std::vector<std::uint8_t> arg2;
    Tensor<T> pool2 = maxpool2(conv2, cache ? &arg2 : nullptr);
    pool2.shape = {m, c.flat_features()};

    Tensor<T> hidden = dense_forward(pool2, params_.dense_weight(), params_.dense_bias());
    relu_inplace(hidden);
    Rng rng(dropout_seed);
    std::vector<T> scale;
    Tensor<T> dropped = dropout(hidden, c.dropout_rate, rng, training, cache ? &scale : nullptr);

    Tensor<T> logits = dense_forward(dropped, params_.head_weight(), params_.head_bias());
    Tensor<T> probs = softmax_heads(logits, c.classes);

    if (cache) {
        cache->batch = m;
        cache->input = input;
        cache->conv1_out = std::move(conv1);
        cache->pool1_argmax = std::move(arg1);
        cache->pool1_out = std::move(pool1);
        cache->conv2_out = std::move(conv2);
        cache->pool2_argmax = std::move(arg2);
        cache->pool2_out = std::move(pool2);
        cache->dense_out = std::move(hidden);
        cache->dropout_scale = std::move(scale);
        cache->dropped = std::move(dropped);
        cache->probs = probs;
    }
    return probs;
}

template <typename T>
Tensor<T> Network<T>::predict(std::span<const T> inputs, std::size_t batch) const {
    const std::size_t n = config_.input_len;
    if (inputs.size() != batch * n) {
        throw ShapeError("predict: got " + std::to_string(inputs.size()) + " samples for " + std::to_string(batch) +
                         " traces of length " + std::to_string(n));
    }
    Tensor<T> probs({batch, 3, config_.classes});
    const std::size_t row = 3 * config_.classes;
    for (std::size_t start = 0; start < batch; start += kInferenceChunk) {
        const std::size_t count = std::min(kInferenceChunk, batch - start);
        Tensor<T> chunk({kInferenceChunk, n, 1});
        std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(start * n), count * n, chunk.data.begin());
        const Tensor<T> out = forward_core(chunk, false, 0, nullptr);
        std::copy_n(out.data.begin(), count * row, probs.data.begin() + static_cast<std::ptrdiff_t>(start * row));
    }
    return probs;
}

template <typename T>
double Network<T>::forward_train(std::span<const T> inputs, std::span<const T> targets, std::size_t batch,
                                 std::uint64_t dropout_seed) {
    const std::size_t n = config_.input_len;
    if (batch == 0 || inputs.size() != batch * n) {
        throw ShapeError("forward: got " + std::to_string(inputs.size()) + " samples for " + std::to_string(batch) +
                         " traces of length " + std::to_string(n));
    }
    if (targets.size() != batch * config_.logits()) {
        throw ShapeError("forward: targets must be [M x 3 x K]");
    }
    Tensor<T> input({batch, n, 1});
    std::copy(inputs.begin(), inputs.end(), input.data.begin());
    ForwardCache<T> cache;
    forward_core(input, true, dropout_seed, &cache);
    cache.targets = Tensor<T>({batch, 3, config_.classes});
    std::copy(targets.begin(), targets.end(), cache.targets.data.begin());
    last_loss_ = cross_entropy(cache.probs, cache.targets);
    cache_ = std::move(cache);
    return last_loss_;
}

template <typename T>
const Tensor<T>& Network<T>::last_probs() const {
    if (!cache_) throw Error("no cached forward pass");
    return cache_->probs;
}

template <typename T>
void Network<T>::backward(Parameters<T>& grads) const {
    if (!cache_) {
        throw Error("backward called without a cached training forward pass");
    }
    const ForwardCache<T>& c = *cache_;
    const std::size_t m = c.batch;
    if (!grads.congruent(params_)) grads = Parameters<T>::zeros(config_);

    // d(loss)/d(logits) for softmax + cross-entropy, mean over traces.
    Tensor<T> dlogits({m, config_.logits()});
    const T inv_m = static_cast<T>(1.0 / static_cast<double>(m));
    for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] = (c.probs[i] - c.targets[i]) * inv_m;

    Tensor<T> dhidden = dense_backward(c.dropped, params_.head_weight(), dlogits, grads.head_weight(),
                                       grads.head_bias());
    for (std::size_t i = 0; i < dhidden.size(); ++i) dhidden[i] *= c.dropout_scale[i];
    relu_mask_inplace(c.dense_out, dhidden);

    Tensor<T> dpool2 =
        dense_backward(c.pool2_out, params_.dense_weight(), dhidden, grads.dense_weight(), grads.dense_bias());
    dpool2.shape = {m, config_.input_len / 4, config_.conv2_filters};

    Tensor<T> dconv2 = maxpool2_backward(dpool2, c.pool2_argmax);
    relu_mask_inplace(c.conv2_out, dconv2);
    Tensor<T> dpool1 =
        conv1d_backward(c.pool1_out, params_.conv2_kernel(), dconv2, grads.conv2_kernel(), grads.conv2_bias());

    Tensor<T> dconv1 = maxpool2_backward(dpool1, c.pool1_argmax);
    relu_mask_inplace(c.conv1_out, dconv1);
    conv1d_backward(c.input, params_.conv1_kernel(), dconv1, grads.conv1_kernel(), grads.conv1_bias(), false);
}

// ---- optimizer --------------------------------------------------------------

template <typename T>
AdamState<T> AdamState<T>::fresh(const ModelConfig& config, const AdamConfig& hyper) {
    return {hyper, 0, Parameters<T>::zeros(config), Parameters<T>::zeros(config)};
}

template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v,
                 const AdamConfig& hyper, std::uint64_t step) {
    if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
        throw ShapeError("adam: parameter, gradient and moment sizes disagree");
    }
    const double t = static_cast<double>(step);
    const T b1 = static_cast<T>(hyper.beta1);
    const T b2 = static_cast<T>(hyper.beta2);
    const T c1 = static_cast<T>(1.0 - hyper.beta1);
    const T c2 = static_cast<T>(1.0 - hyper.beta2);
    const T lr_hat = static_cast<T>(hyper.learning_rate / (1.0 - std::pow(hyper.beta1, t)));
    const T inv_bc2 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta2, t)));
    const T eps = static_cast<T>(hyper.epsilon);
    T* p = params.data();
    const T* g = grads.data();
    T* mm = m.data();
    T* vv = v.data();
    const std::size_t n = params.size();
    for (std::size_t i = 0; i < n; ++i) {
        mm[i] = b1 * mm[i] + c1 * g[i];
        vv[i] = b2 * vv[i] + c2 * g[i] * g[i];
        p[i] -= lr_hat * mm[i] / (std::sqrt(vv[i] * inv_bc2) + eps);
    }
}

template <typename T>
void adam_step(AdamState<T>& state, Parameters<T>& params, const Parameters<T>& grads) {
    if (!params.congruent(grads) || !params.congruent(state.first_moment) ||
        !params.congruent(state.second_moment)) {
        throw ShapeError("adam: optimizer state is not congruent with the model");
    }
    ++state.step;
    for (std::size_t b = 0; b < kParameterBlocks; ++b) {
        adam_update<T>(params.blocks[b].data, grads.blocks[b].data, state.first_moment.blocks[b].data,
                       state.second_moment.blocks[b].data, state.hyper, state.step);
    }
}

// ---- gradient check ---------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

GradCheckReport compare_with_finite_differences(Network<double>& net, std::span<const double> inputs,
                                                std::span<const double> targets, std::size_t batch,
                                                std::uint64_t dropout_seed, const Parameters<double>& analytic,
                                                double eps) {
    GradCheckReport report;
    auto& params = net.params();
    if (!params.congruent(analytic)) throw ShapeError("gradient check: analytic gradients are not congruent");
    for (std::size_t b = 0; b < kParameterBlocks; ++b) {
        auto& block = params.blocks[b].data;
        for (std::size_t i = 0; i < block.size(); ++i) {
            const double saved = block[i];
            block[i] = saved + eps;
            const double up = net.forward_train(inputs, targets, batch, dropout_seed);
            block[i] = saved - eps;
            const double down = net.forward_train(inputs, targets, batch, dropout_seed);
            block[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double err = relative_error(analytic.blocks[b].data[i], numeric);
            ++report.checked;
            if (err > report.max_relative_error) {
                report.max_relative_error = err;
                report.worst_block = b;
                report.worst_index = i;
            }
        }
    }
    return report;
}

GradCheckReport grad_check(const ModelConfig& config, std::span<const double> inputs, std::span<const double> targets,
                           std::size_t batch, std::uint64_t seed, double eps) {
    Network<double> net(config);
    net.initialize(seed);
    const std::uint64_t dropout_seed = derive_seed(seed, 1);
    net.forward_train(inputs, targets, batch, dropout_seed);
    Parameters<double> grads;
    net.backward(grads);
    return compare_with_finite_differences(net, inputs, targets, batch, dropout_seed, grads, eps);
}

// ---- instantiations -----------------------------------------------------------

#define QPCNET_INSTANTIATE(T)                                                                                      \
    template struct Tensor<T>;                                                                                     \
    template Tensor<T> conv1d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> conv1d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,           \
                                       Tensor<T>&, bool);                                                          \
    template Tensor<T> relu(const Tensor<T>&);                                                                     \
    template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> maxpool2(const Tensor<T>&, std::vector<std::uint8_t>*);                                     \
    template Tensor<T> maxpool2_backward(const Tensor<T>&, const std::vector<std::uint8_t>&);                      \
    template Tensor<T> dropout(const Tensor<T>&, double, Rng&, bool, std::vector<T>*);                             \
    template Tensor<T> dense_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,            \
                                      Tensor<T>&, bool);                                                           \
    template Tensor<T> softmax_heads(const Tensor<T>&, std::size_t);                                               \
    template double cross_entropy(const Tensor<T>&, const Tensor<T>&);                                             \
    template struct Parameters<T>;                                                                                 \
    template class Network<T>;                                                                                     \
    template struct AdamState<T>;                                                                                  \
    template void adam_update(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, const AdamConfig&,     \
                              std::uint64_t);                                                                      \
    template void adam_step(AdamState<T>&, Parameters<T>&, const Parameters<T>&);

QPCNET_INSTANTIATE(float)
QPCNET_INSTANTIATE(double)

#undef QPCNET_INSTANTIATE

}  // namespace qpcnet::nn
