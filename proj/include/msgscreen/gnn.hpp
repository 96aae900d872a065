#pragma once

// Heterogeneous GraphSAGE-style network on the patient/symptom/comorbidity
// graph: hand-written forward and backward passes, Adam training on the
// class-weighted event loss, finite-difference gradient check, event-delta
// attribution and graph salience.

#include <array>
#include <fstream>
#include <random>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <json.hpp>

#include "msgscreen/hetgraph.hpp"

namespace msgscreen {

enum class NodeType : std::size_t { Patient = 0, Symptom = 1, Comorbidity = 2 };
inline constexpr std::size_t kNodeTypes = 3;
inline constexpr std::array<std::string_view, kNodeTypes> kNodeTypeNames = {"patient", "symptom", "comorbidity"};

/// Message-passing relations, named destination <- source.
struct RelationInfo {
    std::string_view name;
    NodeType src;
    NodeType dst;
};

inline constexpr std::array<RelationInfo, 6> kRelations = {{
    {"patient_from_symptom", NodeType::Symptom, NodeType::Patient},
    {"symptom_from_patient", NodeType::Patient, NodeType::Symptom},
    {"patient_from_comorbidity", NodeType::Comorbidity, NodeType::Patient},
    {"comorbidity_from_patient", NodeType::Patient, NodeType::Comorbidity},
    {"patient_from_patient", NodeType::Patient, NodeType::Patient},
    {"symptom_from_symptom", NodeType::Symptom, NodeType::Symptom},
}};

enum class Activation { ReLU, Identity };

struct TrainConfig {
    std::size_t layers = 2;
    std::size_t hidden = 32;
    double dropout = 0.2;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t epochs = 200;
    std::size_t patience = 20;
    Activation activation = Activation::ReLU;
    std::uint64_t seed = 0;
};

using Labels = std::vector<int>;

// =============================================================================
// Graph tensors
// =============================================================================

using SparseMat = Eigen::SparseMatrix<double>;

/// Dense features (one column per node) and row-normalised relation
/// operators A_r (n_src x n_dst), so that mean aggregation is H_src * A_r.
struct GraphTensors {
    std::array<Eigen::MatrixXd, kNodeTypes> features;
    std::array<SparseMat, kRelations.size()> adjacency;
    std::array<std::size_t, kNodeTypes> counts{};
};

namespace detail {

inline Eigen::MatrixXd columns_of(const FeatureRows& rows, std::size_t dim) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j)
        for (std::size_t i = 0; i < dim && i < rows[j].size(); ++i)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[j][i];
    return m;
}

struct Triple {
    std::size_t src, dst;
    double w;
};

inline SparseMat mean_operator(std::size_t n_src, std::size_t n_dst, const std::vector<Triple>& edges) {
    std::vector<double> degree(n_dst, 0.0);
    for (const auto& e : edges) degree[e.dst] += 1.0;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(edges.size());
    for (const auto& e : edges)
        trips.emplace_back(static_cast<int>(e.src), static_cast<int>(e.dst), e.w / degree[e.dst]);
    SparseMat a(static_cast<Eigen::Index>(n_src), static_cast<Eigen::Index>(n_dst));
    a.setFromTriplets(trips.begin(), trips.end());
    return a;
}

} // namespace detail

/// Converts a graph to tensors. When `masked_symptom` is set, that symptom's
/// features are zeroed and all of its edges removed.
inline GraphTensors make_tensors(const HeteroGraph& g, std::size_t symptom_dim,
                                 std::optional<std::size_t> masked_symptom = std::nullopt) {
    GraphTensors t;
    t.counts = {g.n_patients(), g.n_symptoms(), g.n_comorbidities()};
    t.features[0] = detail::columns_of(g.patient_features, g.patient_feature_dim());
    t.features[1] = detail::columns_of(g.symptom_features, symptom_dim);
    t.features[2] = detail::columns_of(g.comorbidity_features, g.n_comorbidities());
    if (masked_symptom) t.features[1].col(static_cast<Eigen::Index>(*masked_symptom)).setZero();

    auto skip = [&](std::size_t s) { return masked_symptom && *masked_symptom == s; };
    std::vector<detail::Triple> ps, sp, cp, pc, pp, ss;
    for (const auto& e : g.patient_symptom) {
        if (skip(e.symptom)) continue;
        ps.push_back({e.symptom, e.patient, e.scale()});
        sp.push_back({e.patient, e.symptom, e.scale()});
    }
    for (const auto& e : g.patient_comorbidity) {
        cp.push_back({e.comorbidity, e.patient, 1.0});
        pc.push_back({e.patient, e.comorbidity, 1.0});
    }
    for (const auto& e : g.patient_patient) pp.push_back({e.src, e.dst, e.weight});
    for (const auto& e : g.symptom_symptom)
        if (!skip(e.src) && !skip(e.dst)) ss.push_back({e.src, e.dst, e.weight});

    std::array<std::vector<detail::Triple>*, kRelations.size()> lists = {&ps, &sp, &cp, &pc, &pp, &ss};
    for (std::size_t r = 0; r < kRelations.size(); ++r)
        t.adjacency[r] = detail::mean_operator(t.counts[static_cast<std::size_t>(kRelations[r].src)],
                                               t.counts[static_cast<std::size_t>(kRelations[r].dst)], *lists[r]);
    return t;
}

// =============================================================================
// Model
// =============================================================================

struct ModelShape {
    std::size_t patient_dim = 0;
    std::size_t symptom_dim = 0;
    std::size_t comorbidity_dim = 0;
    std::size_t hidden = 32;
    std::size_t layers = 2;
    Activation activation = Activation::ReLU;

    std::size_t input_dim(std::size_t type) const {
        return type == 0 ? patient_dim : type == 1 ? symptom_dim : comorbidity_dim;
    }

    bool operator==(const ModelShape&) const = default;
};

struct ParamBlock {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
};

/// All parameters live in one flat vector; named blocks are column-major
/// views into it.
class HeteroModel {
public:
    HeteroModel() = default;

    explicit HeteroModel(ModelShape shape) : shape_(shape) {
        if (shape_.hidden < 1 || shape_.layers < 1) throw Error("model: hidden and layers must be >= 1");
        const auto h = shape_.hidden;
        for (std::size_t t = 0; t < kNodeTypes; ++t)
            add_block("input." + std::string(kNodeTypeNames[t]), h, shape_.input_dim(t));
        for (std::size_t l = 0; l < shape_.layers; ++l) {
            for (std::size_t t = 0; t < kNodeTypes; ++t)
                add_block("layer" + std::to_string(l) + ".self." + std::string(kNodeTypeNames[t]), h, h);
            for (const auto& r : kRelations) add_block("layer" + std::to_string(l) + ".rel." + std::string(r.name), h, h);
        }
        add_block("readout.weight", 1, h);
        add_block("readout.bias", 1, 1);
        params_.assign(size_, 0.0);
    }

    /// Glorot-uniform weights, zero readout bias.
    static HeteroModel initialized(ModelShape shape, std::uint64_t seed) {
        HeteroModel m(shape);
        std::mt19937_64 rng(seed);
        for (const auto& b : m.blocks_) {
            if (b.name == "readout.bias" || b.rows * b.cols == 0) continue;
            double limit = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
            std::uniform_real_distribution<double> u(-limit, limit);
            for (std::size_t i = 0; i < b.rows * b.cols; ++i) m.params_[b.offset + i] = u(rng);
        }
        return m;
    }

    const ModelShape& shape() const { return shape_; }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }

    const ParamBlock& block(std::string_view name) const {
        for (const auto& b : blocks_)
            if (b.name == name) return b;
        throw Error("model has no parameter block '" + std::string(name) + "'");
    }

    Eigen::Map<const Eigen::MatrixXd> view(const ParamBlock& b) const {
        return {params_.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
    }

    std::size_t input_block(std::size_t type) const { return type; }
    std::size_t self_block(std::size_t layer, std::size_t type) const {
        return kNodeTypes + layer * (kNodeTypes + kRelations.size()) + type;
    }
    std::size_t rel_block(std::size_t layer, std::size_t r) const {
        return kNodeTypes + layer * (kNodeTypes + kRelations.size()) + kNodeTypes + r;
    }
    std::size_t readout_weight_block() const { return blocks_.size() - 2; }
    std::size_t readout_bias_block() const { return blocks_.size() - 1; }

private:
    void add_block(std::string name, std::size_t rows, std::size_t cols) {
        blocks_.push_back({std::move(name), rows, cols, size_});
        size_ += rows * cols;
    }

    ModelShape shape_;
    std::vector<ParamBlock> blocks_;
    std::vector<double> params_;
    std::size_t size_ = 0;
};

inline ModelShape shape_for(const HeteroGraph& g, const TrainConfig& config) {
    return {g.patient_feature_dim(), g.symptom_feature_dim(), g.n_comorbidities(), config.hidden, config.layers,
            config.activation};
}

// =============================================================================
// Forward / backward
// =============================================================================

/// Per-patient loss weights w_p = 1 / (2 * prevalence of the patient's class)
/// over the patients selected by `mask` (all when empty); others get 0.
inline std::vector<double> class_weights(const Labels& labels, const std::vector<bool>& mask = {}) {
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        (labels[i] ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) throw Error("training labels contain a single class");
    const double n = static_cast<double>(pos + neg);
    std::vector<double> w(labels.size(), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        w[i] = 1.0 / (2.0 * static_cast<double>(labels[i] ? pos : neg) / n);
    }
    return w;
}

struct ForwardCache {
    std::vector<std::array<Eigen::MatrixXd, kNodeTypes>> h;      // h[0] = input projection
    std::vector<std::array<Eigen::MatrixXd, kNodeTypes>> z;      // pre-activations per layer
    std::vector<std::array<Eigen::MatrixXd, kNodeTypes>> mask;   // dropout masks (empty if none)
    std::vector<std::array<Eigen::MatrixXd, kRelations.size()>> messages;
    Eigen::RowVectorXd logits;
};

namespace detail {

inline Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
    return a == Activation::ReLU ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
}

inline Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& z, Activation a) {
    if (a == Activation::Identity) return Eigen::MatrixXd::Ones(z.rows(), z.cols());
    return (z.array() > 0.0).cast<double>().matrix();
}

} // namespace detail

/// Runs the network. Dropout masks are drawn from `rng` when it is given and
/// `dropout > 0`.
inline ForwardCache forward(const HeteroModel& model, const GraphTensors& t, double dropout = 0.0,
                            std::mt19937_64* rng = nullptr) {
    const auto& shape = model.shape();
    const auto& blocks = model.blocks();
    ForwardCache c;
    c.h.resize(shape.layers + 1);
    c.z.resize(shape.layers);
    c.mask.resize(shape.layers);
    c.messages.resize(shape.layers);
    for (std::size_t ty = 0; ty < kNodeTypes; ++ty)
        c.h[0][ty] = model.view(blocks[model.input_block(ty)]) * t.features[ty];

    for (std::size_t l = 0; l < shape.layers; ++l) {
        for (std::size_t ty = 0; ty < kNodeTypes; ++ty)
            c.z[l][ty] = model.view(blocks[model.self_block(l, ty)]) * c.h[l][ty];
        for (std::size_t r = 0; r < kRelations.size(); ++r) {
            auto src = static_cast<std::size_t>(kRelations[r].src);
            auto dst = static_cast<std::size_t>(kRelations[r].dst);
            c.messages[l][r] = c.h[l][src] * t.adjacency[r];
            c.z[l][dst] += model.view(blocks[model.rel_block(l, r)]) * c.messages[l][r];
        }
        for (std::size_t ty = 0; ty < kNodeTypes; ++ty) {
            c.h[l + 1][ty] = detail::activate(c.z[l][ty], shape.activation);
            if (rng && dropout > 0.0) {
                std::bernoulli_distribution keep(1.0 - dropout);
                Eigen::MatrixXd m(c.h[l + 1][ty].rows(), c.h[l + 1][ty].cols());
                for (Eigen::Index j = 0; j < m.cols(); ++j)
                    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
                c.h[l + 1][ty] = c.h[l + 1][ty].cwiseProduct(m);
                c.mask[l][ty] = std::move(m);
            }
        }
    }
    const auto& w = blocks[model.readout_weight_block()];
    const double bias = model.params()[blocks[model.readout_bias_block()].offset];
    c.logits = (model.view(w) * c.h[shape.layers][0]).array() + bias;
    return c;
}

/// (1/n) * sum_p w_p * BCE(sigmoid(logit_p), y_p) over weighted patients.
inline double weighted_loss(const Eigen::RowVectorXd& logits, const Labels& labels, const std::vector<double>& weights) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (weights[p] == 0.0) continue;
        total += weights[p] * bce_with_logit(logits(static_cast<Eigen::Index>(p)), labels[p] != 0);
        ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

/// Gradient of weighted_loss with respect to every model parameter.
inline std::vector<double> backward(const HeteroModel& model, const GraphTensors& t, const ForwardCache& c,
                                    const Labels& labels, const std::vector<double>& weights) {
    const auto& shape = model.shape();
    const auto& blocks = model.blocks();
    std::vector<double> grad(model.size(), 0.0);
    auto gview = [&](std::size_t b) {
        return Eigen::Map<Eigen::MatrixXd>(grad.data() + blocks[b].offset, static_cast<Eigen::Index>(blocks[b].rows),
                                           static_cast<Eigen::Index>(blocks[b].cols));
    };

    std::size_t n = 0;
    for (double w : weights)
        if (w != 0.0) ++n;
    Eigen::RowVectorXd dlogit = Eigen::RowVectorXd::Zero(c.logits.size());
    for (std::size_t p = 0; p < labels.size(); ++p)
        if (weights[p] != 0.0)
            dlogit(static_cast<Eigen::Index>(p)) =
                weights[p] * (sigmoid(c.logits(static_cast<Eigen::Index>(p))) - labels[p]) / static_cast<double>(n);

    const auto& h_last = c.h[shape.layers];
    gview(model.readout_weight_block()) += dlogit * h_last[0].transpose();
    grad[blocks[model.readout_bias_block()].offset] += dlogit.sum();

    std::array<Eigen::MatrixXd, kNodeTypes> dh;
    for (std::size_t ty = 0; ty < kNodeTypes; ++ty) dh[ty] = Eigen::MatrixXd::Zero(h_last[ty].rows(), h_last[ty].cols());
    dh[0] = model.view(blocks[model.readout_weight_block()]).transpose() * dlogit;

    for (std::size_t l = shape.layers; l-- > 0;) {
        std::array<Eigen::MatrixXd, kNodeTypes> dz;
        for (std::size_t ty = 0; ty < kNodeTypes; ++ty) {
            dz[ty] = dh[ty].cwiseProduct(detail::activation_grad(c.z[l][ty], shape.activation));
            if (c.mask[l][ty].size() > 0) dz[ty] = dz[ty].cwiseProduct(c.mask[l][ty]);
        }
        std::array<Eigen::MatrixXd, kNodeTypes> dprev;
        for (std::size_t ty = 0; ty < kNodeTypes; ++ty) {
            auto self = model.self_block(l, ty);
            gview(self) += dz[ty] * c.h[l][ty].transpose();
            dprev[ty] = model.view(blocks[self]).transpose() * dz[ty];
        }
        for (std::size_t r = 0; r < kRelations.size(); ++r) {
            auto src = static_cast<std::size_t>(kRelations[r].src);
            auto dst = static_cast<std::size_t>(kRelations[r].dst);
            auto rb = model.rel_block(l, r);
            gview(rb) += dz[dst] * c.messages[l][r].transpose();
            Eigen::MatrixXd dm = model.view(blocks[rb]).transpose() * dz[dst];
            dprev[src] += dm * t.adjacency[r].transpose();
        }
        dh = std::move(dprev);
    }
    for (std::size_t ty = 0; ty < kNodeTypes; ++ty) gview(model.input_block(ty)) += dh[ty] * t.features[ty].transpose();
    return grad;
}

// =============================================================================
// Training
// =============================================================================

struct TrainResult {
    HeteroModel model;
    std::vector<double> history;  // per-epoch training loss
    bool stopped_early = false;
    std::size_t best_epoch = 0;
};

inline void check_config(const TrainConfig& c) {
    if (c.layers < 1 || c.hidden < 1) throw Error("train: layers and hidden must be >= 1");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw Error("train: dropout must lie in [0,1)");
    if (!(c.learning_rate > 0.0 && c.learning_rate < 1.0)) throw Error("train: learning rate must lie in (0,1)");
    if (!(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0)) throw Error("train: Adam betas must lie in (0,1)");
}

/// Full-batch Adam on the class-weighted event loss. Only patients selected
/// by `train_mask` (all when empty) contribute. The returned model holds the
/// parameters of the best-loss epoch; training stops once `patience` epochs
/// pass without improvement.
inline TrainResult train(const HeteroGraph& g, const Labels& labels, const TrainConfig& config,
                         const std::vector<bool>& train_mask = {}) {
    check_config(config);
    if (labels.size() != g.n_patients()) throw Error("train: labels do not match patient count");
    if (!train_mask.empty() && train_mask.size() != labels.size()) throw Error("train: mask does not match patient count");
    const auto weights = class_weights(labels, train_mask);
    const auto tensors = make_tensors(g, g.symptom_feature_dim());

    TrainResult result;
    result.model = HeteroModel::initialized(shape_for(g, config), config.seed);
    auto& params = result.model.params();
    std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0), best = params;
    double best_loss = std::numeric_limits<double>::infinity();
    std::mt19937_64 dropout_rng(mix_seed(config.seed, 1));
    std::size_t since_best = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto cache = forward(result.model, tensors, config.dropout, &dropout_rng);
        double loss = weighted_loss(cache.logits, labels, weights);
        if (!std::isfinite(loss))
            throw Error("train: non-finite loss " + fmt_double(loss) + " at epoch " + std::to_string(epoch) +
                        " (learning rate " + fmt_double(config.learning_rate) + ")");
        result.history.push_back(loss);
        if (loss < best_loss) {
            best_loss = loss;
            best = params;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            result.stopped_early = true;
            break;
        }
        auto grad = backward(result.model, tensors, cache, labels, weights);
        const double t = static_cast<double>(epoch + 1);
        const double c1 = 1.0 - std::pow(config.beta1, t);
        const double c2 = 1.0 - std::pow(config.beta2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            params[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
        }
    }
    params = best;
    return result;
}

// =============================================================================
// Inference and attribution
// =============================================================================

inline void check_compatible(const HeteroModel& model, const HeteroGraph& g) {
    const auto& s = model.shape();
    if (s.patient_dim != g.patient_feature_dim() || s.comorbidity_dim != g.n_comorbidities() ||
        (g.n_symptoms() > 0 && s.symptom_dim != g.symptom_feature_dim()))
        throw Error("model feature dimensions do not match the graph");
}

/// Event probability per patient (dropout disabled).
inline std::vector<double> predict(const HeteroModel& model, const HeteroGraph& g) {
    check_compatible(model, g);
    auto cache = forward(model, make_tensors(g, model.shape().symptom_dim));
    std::vector<double> out(g.n_patients());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = sigmoid(cache.logits(static_cast<Eigen::Index>(p)));
    return out;
}

inline double evaluation_loss(const HeteroModel& model, const HeteroGraph& g, const Labels& labels,
                              std::optional<std::size_t> masked_symptom = std::nullopt) {
    check_compatible(model, g);
    auto cache = forward(model, make_tensors(g, model.shape().symptom_dim, masked_symptom));
    return weighted_loss(cache.logits, labels, class_weights(labels));
}

/// Increase in the weighted event loss when `symptom` is masked (features
/// zeroed, edges removed) in the trained model.
inline double event_delta(const HeteroModel& model, const HeteroGraph& g, const Labels& labels,
                          const std::string& symptom) {
    auto idx = g.symptom_index(symptom);
    if (!idx) throw Error("event_delta: unknown symptom '" + symptom + "'");
    return evaluation_loss(model, g, labels, idx) - evaluation_loss(model, g, labels);
}

/// event_delta for every symptom node, in graph order.
inline std::vector<double> event_deltas(const HeteroModel& model, const HeteroGraph& g, const Labels& labels) {
    const double base = evaluation_loss(model, g, labels);
    std::vector<double> out;
    for (std::size_t s = 0; s < g.n_symptoms(); ++s) out.push_back(evaluation_loss(model, g, labels, s) - base);
    return out;
}

struct GradientCheckOptions {
    std::size_t max_checks = 50;
    double step = 1e-5;
    std::uint64_t seed = 0;
};

/// Largest relative error |a - n| / max(|a| + |n|, 1e-6) between analytic and
/// central-difference gradients over a random subset of parameters.
inline double gradient_check(const HeteroModel& model, const HeteroGraph& g, const Labels& labels,
                             const GradientCheckOptions& options = {}) {
    check_compatible(model, g);
    const auto tensors = make_tensors(g, model.shape().symptom_dim);
    const auto weights = class_weights(labels);
    auto cache = forward(model, tensors);
    auto grad = backward(model, tensors, cache, labels, weights);

    std::vector<std::size_t> idx(model.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(options.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), options.max_checks));

    HeteroModel probe = model;
    double worst = 0.0;
    for (auto i : idx) {
        const double original = probe.params()[i];
        probe.params()[i] = original + options.step;
        double up = weighted_loss(forward(probe, tensors).logits, labels, weights);
        probe.params()[i] = original - options.step;
        double down = weighted_loss(forward(probe, tensors).logits, labels, weights);
        probe.params()[i] = original;
        double numeric = (up - down) / (2.0 * options.step);
        double rel = std::abs(grad[i] - numeric) / std::max(std::abs(grad[i]) + std::abs(numeric), 1e-6);
        worst = std::max(worst, rel);
    }
    return worst;
}

// =============================================================================
// Salience
// =============================================================================

struct SalienceResult {
    std::vector<std::string> symptom_ids;
    // Min-max normalised components, aligned with symptom_ids.
    std::vector<double> prevalence;
    std::vector<double> temporal;
    std::vector<double> semantic_intensity;
    std::vector<double> centrality;
    std::vector<double> composite;  // unweighted mean of the four
    // Raw (pre-normalisation) components.
    std::vector<double> raw_prevalence;
    std::vector<double> raw_semantic_intensity;
    std::vector<double> raw_centrality;
};

/// Graph salience per symptom node: case prevalence, short-term temporal
/// score, semantic intensity of messages against the label, and PageRank
/// centrality.
inline SalienceResult salience(const HeteroGraph& g, const Labels& labels, std::span<const MessageRecord> messages,
                               const std::map<std::string, double>& stt, const EmbeddingProvider& provider) {
    if (g.n_symptoms() == 0) throw Error("salience: empty symptom set");
    if (labels.size() != g.n_patients()) throw Error("salience: labels do not match patient count");
    const std::size_t ns = g.n_symptoms();
    SalienceResult r;
    r.symptom_ids = g.symptom_ids;

    std::size_t n_cases = std::count(labels.begin(), labels.end(), 1);
    std::vector<std::set<std::size_t>> case_patients(ns);
    for (const auto& e : g.patient_symptom)
        if (labels[e.patient]) case_patients[e.symptom].insert(e.patient);
    for (std::size_t s = 0; s < ns; ++s)
        r.raw_prevalence.push_back(n_cases ? static_cast<double>(case_patients[s].size()) / static_cast<double>(n_cases)
                                           : 0.0);

    std::vector<double> raw_temporal;
    for (const auto& id : g.symptom_ids) {
        auto it = stt.find(id);
        raw_temporal.push_back(it == stt.end() ? 0.0 : it->second);
    }

    std::vector<std::vector<double>> label_emb;
    for (const auto& l : g.symptom_labels) label_emb.push_back(provider.embed(l));
    std::vector<double> sum(ns, 0.0);
    std::vector<std::size_t> cnt(ns, 0);
    for (const auto& m : messages) {
        std::optional<std::vector<double>> emb;
        for (const auto& a : m.annotations) {
            auto s = g.symptom_index(a.sub2_id);
            if (!s) continue;
            if (!emb) emb = provider.embed(m.text);
            sum[*s] += cosine(*emb, label_emb[*s]);
            ++cnt[*s];
        }
    }
    for (std::size_t s = 0; s < ns; ++s)
        r.raw_semantic_intensity.push_back(cnt[s] ? sum[s] / static_cast<double>(cnt[s]) : 0.0);
    r.raw_centrality = centrality(g);

    r.prevalence = minmax_normalize(r.raw_prevalence);
    r.temporal = minmax_normalize(raw_temporal);
    r.semantic_intensity = minmax_normalize(r.raw_semantic_intensity);
    r.centrality = minmax_normalize(r.raw_centrality);
    for (std::size_t s = 0; s < ns; ++s)
        r.composite.push_back((r.prevalence[s] + r.temporal[s] + r.semantic_intensity[s] + r.centrality[s]) / 4.0);
    return r;
}

// =============================================================================
// Checkpoint
// =============================================================================

/// JSON checkpoint: {"format":"msgscreen.hetero_gnn","version":1,
/// "shape":{...},"params":{"<block>":[[row...],...]}}.
inline json to_json(const HeteroModel& model) {
    const auto& s = model.shape();
    json params = json::object();
    for (const auto& b : model.blocks()) {
        json rows = json::array();
        auto view = model.view(b);
        for (std::size_t i = 0; i < b.rows; ++i) {
            json row = json::array();
            for (std::size_t j = 0; j < b.cols; ++j)
                row.push_back(view(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            rows.push_back(std::move(row));
        }
        params[b.name] = std::move(rows);
    }
    return {{"format", "msgscreen.hetero_gnn"},
            {"version", 1},
            {"shape",
             {{"patient_dim", s.patient_dim},
              {"symptom_dim", s.symptom_dim},
              {"comorbidity_dim", s.comorbidity_dim},
              {"hidden", s.hidden},
              {"layers", s.layers},
              {"activation", s.activation == Activation::ReLU ? "relu" : "identity"}}},
            {"params", std::move(params)}};
}

inline HeteroModel model_from_json(const json& j) {
    try {
        if (j.at("format") != "msgscreen.hetero_gnn" || j.at("version") != 1)
            throw Error("unsupported model checkpoint format");
        const auto& s = j.at("shape");
        ModelShape shape{s.at("patient_dim").get<std::size_t>(), s.at("symptom_dim").get<std::size_t>(),
                         s.at("comorbidity_dim").get<std::size_t>(), s.at("hidden").get<std::size_t>(),
                         s.at("layers").get<std::size_t>(),
                         s.at("activation") == "relu" ? Activation::ReLU : Activation::Identity};
        HeteroModel model(shape);
        const auto& params = j.at("params");
        for (const auto& b : model.blocks()) {
            const auto& rows = params.at(b.name);
            if (rows.size() != b.rows) throw Error("checkpoint block '" + b.name + "' has wrong row count");
            for (std::size_t i = 0; i < b.rows; ++i) {
                if (rows[i].size() != b.cols) throw Error("checkpoint block '" + b.name + "' has wrong column count");
                for (std::size_t jx = 0; jx < b.cols; ++jx)
                    model.params()[b.offset + jx * b.rows + i] = rows[i][jx].get<double>();
            }
        }
        return model;
    } catch (const json::exception& e) {
        throw Error(std::string("model checkpoint: ") + e.what());
    }
}

} // namespace msgscreen
