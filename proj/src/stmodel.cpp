#include "sparse_eta/stmodel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <map>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sparse_eta/random.hpp"

namespace sparse_eta::stmodel {

namespace {

void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError("model: " + what);
}

// Registry indices of the parameters used by the temporal branch and the two
// distribution heads (everything downstream of s_v).
constexpr std::array<int, 12> kBParamIdx = {
    ModelParams::kTemporalW, ModelParams::kTemporalB,
    ModelParams::kWeatherEmbed, ModelParams::kHolidayEmbed,
    ModelParams::kMuW1, ModelParams::kMuB1, ModelParams::kMuW2, ModelParams::kMuB2,
    ModelParams::kSigmaW1, ModelParams::kSigmaB1, ModelParams::kSigmaW2, ModelParams::kSigmaB2,
};

// Tape node ids of the downstream parameters, aligned with kBParamIdx.
struct BNodes {
    std::array<int, 12> id{};
    int operator[](int registry_idx) const {
        for (size_t j = 0; j < kBParamIdx.size(); ++j) {
            if (kBParamIdx[j] == registry_idx) return id[j];
        }
        throw std::logic_error("not a downstream parameter");
    }
};

BNodes add_b_params(Tape& t, const ModelParams& p, bool as_leaf) {
    BNodes b;
    for (size_t j = 0; j < kBParamIdx.size(); ++j) {
        const Mat& m = p.at(kBParamIdx[j]);
        b.id[j] = as_leaf ? t.leaf(m) : t.constant(m);
    }
    return b;
}

void validate_ctx(const TemporalContext& ctx, const ModelConfig& cfg) {
    require(ctx.time_step >= 0 && ctx.time_step < kTimeSteps, "time_step out of range");
    require(ctx.day_of_week >= 0 && ctx.day_of_week < 7, "day_of_week out of range");
    require(ctx.weather_id >= 0 && ctx.weather_id < cfg.weather_vocab,
            "weather_id out of range [0, " + std::to_string(cfg.weather_vocab) + ")");
    require(ctx.holiday_id >= 0 && ctx.holiday_id < cfg.holiday_vocab,
            "holiday_id out of range [0, " + std::to_string(cfg.holiday_vocab) + ")");
}

// s_t = relu([onehot(dow) | onehot(ts) | E_w[weather] | E_h[holiday]] W + b), 1 x D.
int build_temporal(Tape& t, const BNodes& b, const TemporalContext& ctx) {
    Mat dow(1, 7);
    dow.at(0, ctx.day_of_week) = 1.0;
    Mat tod(1, kTimeSteps);
    tod.at(0, ctx.time_step) = 1.0;
    int x = t.hconcat({t.constant(std::move(dow)), t.constant(std::move(tod)),
                       t.gather_rows(b[ModelParams::kWeatherEmbed], {ctx.weather_id}),
                       t.gather_rows(b[ModelParams::kHolidayEmbed], {ctx.holiday_id})});
    return t.relu(t.add_rowvec(t.matmul(x, b[ModelParams::kTemporalW]), b[ModelParams::kTemporalB]));
}

// Distribution heads applied row-wise to F (n x D): mu scales the free-flow
// time by a clamped log-factor, sigma is a shifted softplus.
struct HeadNodes {
    int mu = -1;
    int sigma = -1;
};

HeadNodes build_heads(Tape& t, const BNodes& b, const ModelConfig& cfg, int f_node, int base_col) {
    int mu_h = t.relu(t.add_rowvec(t.matmul(f_node, b[ModelParams::kMuW1]), b[ModelParams::kMuB1]));
    int mu_out = t.add_rowvec(t.matmul(mu_h, b[ModelParams::kMuW2]), b[ModelParams::kMuB2]);
    HeadNodes h;
    h.mu = t.mul(t.exp_(t.clamp(mu_out, -cfg.mu_log_clamp, cfg.mu_log_clamp)), base_col);
    int sg_h = t.relu(t.add_rowvec(t.matmul(f_node, b[ModelParams::kSigmaW1]), b[ModelParams::kSigmaB1]));
    int sg_out = t.add_rowvec(t.matmul(sg_h, b[ModelParams::kSigmaW2]), b[ModelParams::kSigmaB2]);
    h.sigma = t.add_const(t.softplus(sg_out), cfg.sigma_min_s);
    return h;
}

struct NllNodes {
    int nll = -1;
    int mu_total = -1;
    int var_total = -1;
};

// (T - mu_T)^2 / (2 sigma_T^2) + 0.5 log(2 pi sigma_T^2), given nodes holding
// mu_T and sigma_T^2 = sum of per-segment variances.
NllNodes build_nll(Tape& t, int mu_total, int var_total, double t_obs) {
    NllNodes n;
    n.mu_total = mu_total;
    n.var_total = var_total;
    int res = t.sub(t.constant(Mat::scalar(t_obs)), n.mu_total);
    int quad = t.div(t.mul(res, res), t.scale(n.var_total, 2.0));
    int norm = t.scale(t.log_(t.scale(n.var_total, 2.0 * M_PI)), 0.5);
    n.nll = t.add(quad, norm);
    return n;
}

// Relations with at least one neighbor pair anywhere in the graph; the
// convolution skips globally-empty relations (their weights keep zero grads).
std::array<bool, netgraph::kNumRoadClasses> active_relations(const netgraph::RelationalAdjacency& adj) {
    std::array<bool, netgraph::kNumRoadClasses> act{};
    for (size_t i = 0; i < adj.num_vertices(); ++i) {
        for (int r = 0; r < netgraph::kNumRoadClasses; ++r) {
            if (!adj.neighbors(static_cast<int>(i), r).empty()) act[static_cast<size_t>(r)] = true;
        }
    }
    return act;
}

// Three rounds of h <- sum_r rel_gather(h) W_r + h W_self, ReLU between
// rounds, linear output. `wnode[10*l]` is the self weight of layer l,
// `wnode[10*l + 1 + r]` its relation weights.
int build_rgcn_layers(Tape& t, const netgraph::RelationalAdjacency& adj,
                      const std::array<bool, netgraph::kNumRoadClasses>& act, int h0,
                      const std::array<int, 30>& wnode) {
    int h = h0;
    for (int l = 0; l < kRgcnLayers; ++l) {
        std::vector<int> terms;
        for (int r = 0; r < netgraph::kNumRoadClasses; ++r) {
            if (!act[static_cast<size_t>(r)]) continue;
            terms.push_back(t.matmul(t.rel_gather(h, &adj, r), wnode[static_cast<size_t>(10 * l + 1 + r)]));
        }
        terms.push_back(t.matmul(h, wnode[static_cast<size_t>(10 * l)]));
        h = t.add_n(terms);
        if (l + 1 < kRgcnLayers) h = t.relu(h);
    }
    return h;
}

double inverse_softplus(double y) {
    require(y > 0.0, "inverse softplus needs a positive argument");
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

void fill_glorot(Mat& m, RandomStream& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(m.rows + m.cols));
    for (double& v : m.a) v = rng.uniform(-limit, limit);
}

} // namespace

size_t ModelParams::num_scalars() const {
    size_t n = 0;
    for (const Mat& m : mats) n += m.size();
    return n;
}

const std::vector<std::string>& ModelParams::mat_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> v;
        v.emplace_back("class_embed");
        v.emplace_back("lanes_embed");
        v.emplace_back("oneway_embed");
        for (int l = 0; l < kRgcnLayers; ++l) {
            v.push_back("rgcn_l" + std::to_string(l) + "_self");
            for (int r = 0; r < netgraph::kNumRoadClasses; ++r) {
                v.push_back("rgcn_l" + std::to_string(l) + "_rel" + std::to_string(r));
            }
        }
        v.emplace_back("temporal_w");
        v.emplace_back("temporal_b");
        v.emplace_back("weather_embed");
        v.emplace_back("holiday_embed");
        v.emplace_back("mu_w1");
        v.emplace_back("mu_b1");
        v.emplace_back("mu_w2");
        v.emplace_back("mu_b2");
        v.emplace_back("sigma_w1");
        v.emplace_back("sigma_b1");
        v.emplace_back("sigma_w2");
        v.emplace_back("sigma_b2");
        return v;
    }();
    return names;
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
    require(cfg.hidden_dim > 0 && cfg.head_hidden_dim > 0, "hidden dims must be positive");
    require(cfg.class_embed_dim > 0 && cfg.lanes_embed_dim > 0 && cfg.oneway_embed_dim > 0,
            "embedding dims must be positive");
    require(cfg.weather_embed_dim > 0 && cfg.holiday_embed_dim > 0, "embedding dims must be positive");
    require(cfg.weather_vocab > 0 && cfg.holiday_vocab > 0, "vocab sizes must be positive");
    require(cfg.mu_log_clamp > 0.0, "mu_log_clamp must be positive");
    require(cfg.sigma_min_s > 0.0, "sigma_min_s must be positive");
    require(cfg.sigma_init_s > cfg.sigma_min_s, "sigma_init_s must exceed sigma_min_s");

    const int D = cfg.hidden_dim;
    const int H = cfg.head_hidden_dim;

    ModelParams p;
    p.cfg = cfg;
    p.mats.resize(kNumMats);
    p.mats[kClassEmbed] = Mat(netgraph::kNumRoadClasses, cfg.class_embed_dim);
    p.mats[kLanesEmbed] = Mat(4, cfg.lanes_embed_dim);
    p.mats[kOnewayEmbed] = Mat(2, cfg.oneway_embed_dim);
    for (int l = 0; l < kRgcnLayers; ++l) {
        int in = l == 0 ? cfg.feature_dim() : D;
        p.mats[static_cast<size_t>(rgcn_self_idx(l))] = Mat(in, D);
        for (int r = 0; r < netgraph::kNumRoadClasses; ++r) {
            p.mats[static_cast<size_t>(rgcn_rel_idx(l, r))] = Mat(in, D);
        }
    }
    p.mats[kTemporalW] = Mat(cfg.temporal_input_dim(), D);
    p.mats[kTemporalB] = Mat(1, D);
    p.mats[kWeatherEmbed] = Mat(cfg.weather_vocab, cfg.weather_embed_dim);
    p.mats[kHolidayEmbed] = Mat(cfg.holiday_vocab, cfg.holiday_embed_dim);
    p.mats[kMuW1] = Mat(D, H);
    p.mats[kMuB1] = Mat(1, H);
    p.mats[kMuW2] = Mat(H, 1);
    p.mats[kMuB2] = Mat(1, 1);
    p.mats[kSigmaW1] = Mat(D, H);
    p.mats[kSigmaB1] = Mat(1, H);
    p.mats[kSigmaW2] = Mat(H, 1);
    p.mats[kSigmaB2] = Mat(1, 1);

    RandomStream rng(seed);
    for (size_t i = 0; i < p.mats.size(); ++i) {
        fill_glorot(p.mats[i], rng);
    }
    // Biases start at zero.
    for (int idx : {kTemporalB, kMuB1, kMuB2, kSigmaB1, kSigmaB2}) {
        std::fill(p.mats[static_cast<size_t>(idx)].a.begin(), p.mats[static_cast<size_t>(idx)].a.end(), 0.0);
    }
    // Zeroed output layers pin the initial prediction to the free-flow prior:
    // mu = base_time exactly, sigma = sigma_init_s.
    std::fill(p.mats[kMuW2].a.begin(), p.mats[kMuW2].a.end(), 0.0);
    std::fill(p.mats[kSigmaW2].a.begin(), p.mats[kSigmaW2].a.end(), 0.0);
    p.mats[kSigmaB2].a[0] = inverse_softplus(cfg.sigma_init_s - cfg.sigma_min_s);
    return p;
}

ModelGrads ModelGrads::zeros_like(const ModelParams& p) {
    ModelGrads g;
    g.g.reserve(p.mats.size());
    for (const Mat& m : p.mats) g.g.emplace_back(m.rows, m.cols);
    return g;
}

void ModelGrads::accumulate(const ModelGrads& other) {
    require(g.size() == other.g.size(), "gradient accumulate shape mismatch");
    for (size_t i = 0; i < g.size(); ++i) {
        require(g[i].rows == other.g[i].rows && g[i].cols == other.g[i].cols,
                "gradient accumulate shape mismatch");
        for (size_t k = 0; k < g[i].size(); ++k) g[i].a[k] += other.g[i].a[k];
    }
}

AdamState AdamState::zeros_like(const ModelParams& p) {
    AdamState s;
    s.m.reserve(p.mats.size());
    s.v.reserve(p.mats.size());
    for (const Mat& m : p.mats) {
        s.m.emplace_back(m.rows, m.cols);
        s.v.emplace_back(m.rows, m.cols);
    }
    return s;
}

void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state, double lr) {
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    require(grads.g.size() == params.mats.size() && state.m.size() == params.mats.size(),
            "adam state shape mismatch");
    state.t += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.mats.size(); ++i) {
        Mat& p = params.mats[i];
        const Mat& g = grads.g[i];
        require(g.rows == p.rows && g.cols == p.cols, "adam gradient shape mismatch");
        Mat& m = state.m[i];
        Mat& v = state.v[i];
        for (size_t k = 0; k < p.size(); ++k) {
            m.a[k] = beta1 * m.a[k] + (1.0 - beta1) * g.a[k];
            v.a[k] = beta2 * v.a[k] + (1.0 - beta2) * g.a[k] * g.a[k];
            double mh = m.a[k] / bc1;
            double vh = v.a[k] / bc2;
            p.a[k] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

int lanes_bucket(int lanes) {
    if (lanes <= 1) return 0;
    if (lanes >= 4) return 3;
    return lanes - 1;
}

SegmentFeatures segment_features(const netgraph::RoadNetwork& net) {
    SegmentFeatures f;
    size_t n = net.num_segments();
    f.class_idx.reserve(n);
    f.lanes_idx.reserve(n);
    f.oneway_idx.reserve(n);
    f.base_times.reserve(n);
    for (const auto& seg : net.segments()) {
        f.class_idx.push_back(static_cast<int>(seg.road_class));
        f.lanes_idx.push_back(lanes_bucket(seg.lanes));
        f.oneway_idx.push_back(seg.oneway ? 1 : 0);
        f.base_times.push_back(netgraph::segment_base_time(seg));
    }
    return f;
}

Mat embed_segment_features(const netgraph::RoadSegment& seg, const ModelParams& params) {
    const Mat& ce = params.at(ModelParams::kClassEmbed);
    const Mat& le = params.at(ModelParams::kLanesEmbed);
    const Mat& oe = params.at(ModelParams::kOnewayEmbed);
    Mat out(1, params.cfg.feature_dim());
    int c = 0;
    int ci = static_cast<int>(seg.road_class);
    for (int j = 0; j < ce.cols; ++j) out.at(0, c++) = ce.at(ci, j);
    int li = lanes_bucket(seg.lanes);
    for (int j = 0; j < le.cols; ++j) out.at(0, c++) = le.at(li, j);
    int oi = seg.oneway ? 1 : 0;
    for (int j = 0; j < oe.cols; ++j) out.at(0, c++) = oe.at(oi, j);
    return out;
}

Mat rgcn_forward(const netgraph::RelationalAdjacency& adj, const Mat& h0, const ModelParams& params) {
    require(static_cast<size_t>(h0.rows) == adj.num_vertices(), "h0 row count != vertex count");
    require(h0.cols == params.cfg.feature_dim(), "h0 feature width mismatch");
    Tape t;
    std::array<int, 30> wnode{};
    for (int l = 0; l < kRgcnLayers; ++l) {
        wnode[static_cast<size_t>(10 * l)] = t.constant(params.at(ModelParams::rgcn_self_idx(l)));
        for (int r = 0; r < netgraph::kNumRoadClasses; ++r) {
            wnode[static_cast<size_t>(10 * l + 1 + r)] = t.constant(params.at(ModelParams::rgcn_rel_idx(l, r)));
        }
    }
    int out = build_rgcn_layers(t, adj, active_relations(adj), t.constant(h0), wnode);
    return t.value(out);
}

Mat temporal_embed(const TemporalContext& ctx, const ModelParams& params) {
    validate_ctx(ctx, params.cfg);
    Tape t;
    BNodes b = add_b_params(t, params, false);
    return t.value(build_temporal(t, b, ctx));
}

std::pair<double, double> predict_params(const Mat& sv, const Mat& st, int seg_id,
                                         const ModelParams& params, double base_time) {
    require(seg_id >= 0 && seg_id < sv.rows, "segment id out of range");
    require(st.rows == 1 && st.cols == sv.cols, "temporal state shape mismatch");
    require(base_time > 0.0, "base time must be positive");
    Mat f(1, sv.cols);
    for (int j = 0; j < sv.cols; ++j) f.at(0, j) = sv.at(seg_id, j) + st.at(0, j);
    Tape t;
    BNodes b = add_b_params(t, params, false);
    HeadNodes h = build_heads(t, b, params.cfg, t.constant(std::move(f)),
                              t.constant(Mat::scalar(base_time)));
    return {t.scalar_value(h.mu), t.scalar_value(h.sigma)};
}

std::pair<double, double> aggregate_route(std::span<const int> route, const TravelTimeTable& table,
                                          int time_step) {
    require(time_step >= 0 && time_step < kTimeSteps, "time step out of range");
    double mu = 0.0;
    double var = 0.0;
    for (int id : route) {
        require(id >= 0 && id < table.mu.rows, "segment id out of range");
        mu += table.mu.at(id, time_step);
        double s = table.sigma.at(id, time_step);
        var += s * s;
    }
    return {mu, std::sqrt(var)};
}

double pair_nll(double mu_T, double sigma_T, double t_obs) {
    double var = sigma_T * sigma_T;
    double res = t_obs - mu_T;
    return res * res / (2.0 * var) + 0.5 * std::log(2.0 * M_PI * var);
}

SpatialForward::SpatialForward(const ModelParams& params, const SegmentFeatures& feats,
                               const netgraph::RelationalAdjacency& adj) {
    require(feats.class_idx.size() == adj.num_vertices(), "feature/adjacency size mismatch");
    std::array<int, 30> wnode{};
    int ce = tape_.leaf(params.at(ModelParams::kClassEmbed));
    int le = tape_.leaf(params.at(ModelParams::kLanesEmbed));
    int oe = tape_.leaf(params.at(ModelParams::kOnewayEmbed));
    param_leaves_.emplace_back(ModelParams::kClassEmbed, ce);
    param_leaves_.emplace_back(ModelParams::kLanesEmbed, le);
    param_leaves_.emplace_back(ModelParams::kOnewayEmbed, oe);
    for (int l = 0; l < kRgcnLayers; ++l) {
        int self = tape_.leaf(params.at(ModelParams::rgcn_self_idx(l)));
        wnode[static_cast<size_t>(10 * l)] = self;
        param_leaves_.emplace_back(ModelParams::rgcn_self_idx(l), self);
        for (int r = 0; r < netgraph::kNumRoadClasses; ++r) {
            int w = tape_.leaf(params.at(ModelParams::rgcn_rel_idx(l, r)));
            wnode[static_cast<size_t>(10 * l + 1 + r)] = w;
            param_leaves_.emplace_back(ModelParams::rgcn_rel_idx(l, r), w);
        }
    }
    int h0 = tape_.hconcat({tape_.gather_rows(ce, feats.class_idx),
                            tape_.gather_rows(le, feats.lanes_idx),
                            tape_.gather_rows(oe, feats.oneway_idx)});
    sv_node_ = build_rgcn_layers(tape_, adj, active_relations(adj), h0, wnode);
}

void SpatialForward::backward(Mat sv_adjoint, ModelGrads& out) {
    tape_.backward_from(sv_node_, std::move(sv_adjoint));
    for (const auto& [idx, leaf] : param_leaves_) {
        const Mat& a = tape_.adjoint(leaf);
        if (a.size() == 0) continue;
        Mat& dst = out.g[static_cast<size_t>(idx)];
        for (size_t k = 0; k < dst.size(); ++k) dst.a[k] += a.a[k];
    }
}

namespace {

struct ChunkResult {
    double loss_sum = 0.0;
    int64_t bad_pair = -1;
    double bad_mu = 0.0;
    double bad_sigma = 0.0;
    std::vector<Mat> bgrads; // aligned with kBParamIdx
    Mat sv_adj;
    std::exception_ptr error;
};

// One contiguous slice of the batch on its own tape. The per-pair feature
// rows are stacked into a single matrix so both head MLPs run as one matmul
// per layer over the whole slice; per-pair totals are then row-range sums.
ChunkResult run_chunk(const ModelParams& params, const SegmentFeatures& feats, const Mat& sv,
                      std::span<const TrainSample> samples, bool with_grad, double inv_n) {
    ChunkResult out;
    Tape t;
    BNodes b = add_b_params(t, params, with_grad);

    // Temporal states are shared by every pair with the same context.
    std::map<std::array<int, 4>, int> st_cache;
    auto temporal_node = [&](const TemporalContext& ctx) {
        std::array<int, 4> key{ctx.time_step, ctx.day_of_week, ctx.weather_id, ctx.holiday_id};
        auto it = st_cache.find(key);
        if (it != st_cache.end()) return it->second;
        int node = build_temporal(t, b, ctx);
        st_cache.emplace(key, node);
        return node;
    };

    std::vector<int> row_leaves;
    std::vector<int> f_nodes;
    std::vector<int> offsets;
    row_leaves.reserve(samples.size());
    f_nodes.reserve(samples.size());
    offsets.reserve(samples.size() + 1);
    int total_rows = 0;
    std::vector<double> base_flat;
    for (const TrainSample& s : samples) {
        int K = static_cast<int>(s.route.size());
        Mat rows(K, sv.cols);
        for (int k = 0; k < K; ++k) {
            int id = s.route[static_cast<size_t>(k)];
            for (int j = 0; j < sv.cols; ++j) rows.at(k, j) = sv.at(id, j);
            base_flat.push_back(feats.base_times[static_cast<size_t>(id)]);
        }
        int rows_node = with_grad ? t.leaf(std::move(rows)) : t.constant(std::move(rows));
        row_leaves.push_back(rows_node);
        f_nodes.push_back(t.add_rowvec(rows_node, temporal_node(s.ctx)));
        offsets.push_back(total_rows);
        total_rows += K;
    }
    offsets.push_back(total_rows);

    int f_all = t.vconcat(f_nodes);
    HeadNodes h = build_heads(t, b, params.cfg, f_all, t.constant(Mat::column(std::move(base_flat))));
    int var_rows = t.mul(h.sigma, h.sigma);

    std::vector<int> nll_nodes;
    nll_nodes.reserve(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        std::vector<int> range(static_cast<size_t>(offsets[i + 1] - offsets[i]));
        for (size_t k = 0; k < range.size(); ++k) range[k] = offsets[i] + static_cast<int>(k);
        int mu_total = t.sum_all(t.gather_rows(h.mu, range));
        int var_total = t.sum_all(t.gather_rows(var_rows, std::move(range)));
        NllNodes n = build_nll(t, mu_total, var_total, samples[i].t_obs);
        nll_nodes.push_back(n.nll);
        double v = t.scalar_value(n.nll);
        if (!std::isfinite(v) && out.bad_pair < 0) {
            out.bad_pair = samples[i].pair_id;
            out.bad_mu = t.scalar_value(n.mu_total);
            out.bad_sigma = std::sqrt(t.scalar_value(n.var_total));
        }
    }
    int root = t.add_n(nll_nodes);
    out.loss_sum = t.scalar_value(root);
    if (with_grad && out.bad_pair < 0) {
        t.backward_from(root, Mat::scalar(inv_n));
        out.bgrads.reserve(kBParamIdx.size());
        for (size_t j = 0; j < kBParamIdx.size(); ++j) {
            const Mat& g = t.adjoint(b.id[j]);
            const Mat& shape = params.at(kBParamIdx[j]);
            if (g.size() == 0) {
                out.bgrads.emplace_back(shape.rows, shape.cols);
            } else {
                out.bgrads.push_back(g);
            }
        }
        out.sv_adj = Mat(sv.rows, sv.cols);
        for (size_t i = 0; i < samples.size(); ++i) {
            const Mat& ra = t.adjoint(row_leaves[i]);
            if (ra.size() == 0) continue;
            const auto& route = samples[i].route;
            for (int k = 0; k < ra.rows; ++k) {
                int id = route[static_cast<size_t>(k)];
                for (int j = 0; j < ra.cols; ++j) out.sv_adj.at(id, j) += ra.at(k, j);
            }
        }
    }
    return out;
}

} // namespace

double batch_nll(const ModelParams& params, const SegmentFeatures& feats,
                 const netgraph::RelationalAdjacency& adj, std::span<const TrainSample> samples,
                 int threads, ModelGrads* grads) {
    if (samples.empty()) return 0.0;
    for (const TrainSample& s : samples) {
        require(!s.route.empty(), "sample " + std::to_string(s.pair_id) + " has an empty route");
        for (int id : s.route) {
            require(id >= 0 && static_cast<size_t>(id) < feats.class_idx.size(),
                    "sample " + std::to_string(s.pair_id) + " references unknown segment");
        }
        validate_ctx(s.ctx, params.cfg);
    }

    SpatialForward spatial(params, feats, adj);
    const Mat& sv = spatial.sv();

    int n = static_cast<int>(samples.size());
    int T = std::clamp(threads, 1, n);
    double inv_n = 1.0 / static_cast<double>(n);
    std::vector<ChunkResult> results(static_cast<size_t>(T));

#ifdef _OPENMP
#pragma omp parallel for num_threads(T) schedule(static, 1) if (T > 1)
#endif
    for (int c = 0; c < T; ++c) {
        ChunkResult& r = results[static_cast<size_t>(c)];
        try {
            int lo = static_cast<int>(static_cast<int64_t>(n) * c / T);
            int hi = static_cast<int>(static_cast<int64_t>(n) * (c + 1) / T);
            r = run_chunk(params, feats, sv, samples.subspan(static_cast<size_t>(lo), static_cast<size_t>(hi - lo)),
                          grads != nullptr, inv_n);
        } catch (...) {
            r.error = std::current_exception();
        }
    }

    for (const ChunkResult& r : results) {
        if (r.error) std::rethrow_exception(r.error);
    }
    for (const ChunkResult& r : results) {
        if (r.bad_pair >= 0) {
            throw NonFiniteLossError("non-finite loss at pair " + std::to_string(r.bad_pair) +
                                     " (mu_T=" + std::to_string(r.bad_mu) +
                                     ", sigma_T=" + std::to_string(r.bad_sigma) + ")");
        }
    }

    double loss = 0.0;
    for (const ChunkResult& r : results) loss += r.loss_sum;
    if (grads != nullptr) {
        Mat sv_adj(sv.rows, sv.cols);
        for (const ChunkResult& r : results) {
            for (size_t j = 0; j < kBParamIdx.size(); ++j) {
                Mat& dst = grads->g[static_cast<size_t>(kBParamIdx[j])];
                const Mat& src = r.bgrads[j];
                for (size_t k = 0; k < dst.size(); ++k) dst.a[k] += src.a[k];
            }
            for (size_t k = 0; k < sv_adj.size(); ++k) sv_adj.a[k] += r.sv_adj.a[k];
        }
        spatial.backward(std::move(sv_adj), *grads);
    }
    return loss * inv_n;
}

TravelTimeTable materialize_table(const ModelParams& params, const SegmentFeatures& feats,
                                  const netgraph::RelationalAdjacency& adj,
                                  const TemporalContext& proto, int threads) {
    validate_ctx(proto, params.cfg);
    SpatialForward spatial(params, feats, adj);
    const Mat sv = spatial.sv();
    int n = sv.rows;

    TravelTimeTable table;
    table.mu = Mat(n, kTimeSteps);
    table.sigma = Mat(n, kTimeSteps);

    Mat base(n, 1);
    for (int i = 0; i < n; ++i) base.at(i, 0) = feats.base_times[static_cast<size_t>(i)];

    int T = std::clamp(threads, 1, kTimeSteps);
    std::vector<std::exception_ptr> errors(static_cast<size_t>(kTimeSteps));
#ifdef _OPENMP
#pragma omp parallel for num_threads(T) schedule(static) if (T > 1)
#endif
    for (int ts = 0; ts < kTimeSteps; ++ts) {
        try {
            Tape t;
            BNodes b = add_b_params(t, params, false);
            TemporalContext ctx = proto;
            ctx.time_step = ts;
            int st = build_temporal(t, b, ctx);
            int f = t.add_rowvec(t.constant(sv), st);
            HeadNodes h = build_heads(t, b, params.cfg, f, t.constant(base));
            const Mat& mu = t.value(h.mu);
            const Mat& sg = t.value(h.sigma);
            for (int i = 0; i < n; ++i) {
                table.mu.at(i, ts) = mu.at(i, 0);
                table.sigma.at(i, ts) = sg.at(i, 0);
            }
        } catch (...) {
            errors[static_cast<size_t>(ts)] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return table;
}

} // namespace sparse_eta::stmodel
