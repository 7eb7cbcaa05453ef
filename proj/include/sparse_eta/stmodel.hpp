#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparse_eta/netgraph.hpp"
#include "sparse_eta/tape.hpp"

namespace sparse_eta::stmodel {

using autodiff::Mat;
using autodiff::Tape;

struct ModelConfig {
    int hidden_dim = 32; // D, shared by R-GCN layers, s_v and s_t
    int class_embed_dim = 8;
    int lanes_embed_dim = 4;
    int oneway_embed_dim = 2;
    int weather_embed_dim = 8;
    int holiday_embed_dim = 4;
    int weather_vocab = 8;
    int holiday_vocab = 2;
    int head_hidden_dim = 32;
    double mu_log_clamp = 3.0; // mu = base * exp(clamp(head, +-mu_log_clamp))
    double sigma_min_s = 1.0;
    double sigma_init_s = 60.0;

    int feature_dim() const { return class_embed_dim + lanes_embed_dim + oneway_embed_dim; }
    int temporal_input_dim() const { return 7 + kTimeSteps + weather_embed_dim + holiday_embed_dim; }
};

inline constexpr int kRgcnLayers = 3;

struct TemporalContext {
    int time_step = 0;  // [0, 48)
    int day_of_week = 0; // [0, 7)
    int weather_id = 0;
    int holiday_id = 0;
};

// All model weights as a flat list of matrices in a fixed registry order.
struct ModelParams {
    // Registry indices.
    static constexpr int kClassEmbed = 0;
    static constexpr int kLanesEmbed = 1;
    static constexpr int kOnewayEmbed = 2;
    static constexpr int kRgcnBase = 3; // layer l: [3 + 10*l] = self, then 9 relation mats
    static constexpr int kTemporalW = 33;
    static constexpr int kTemporalB = 34;
    static constexpr int kWeatherEmbed = 35;
    static constexpr int kHolidayEmbed = 36;
    static constexpr int kMuW1 = 37;
    static constexpr int kMuB1 = 38;
    static constexpr int kMuW2 = 39;
    static constexpr int kMuB2 = 40;
    static constexpr int kSigmaW1 = 41;
    static constexpr int kSigmaB1 = 42;
    static constexpr int kSigmaW2 = 43;
    static constexpr int kSigmaB2 = 44;
    static constexpr int kNumMats = 45;

    ModelConfig cfg;
    std::vector<Mat> mats;

    static ModelParams init(const ModelConfig& cfg, uint64_t seed);
    static const std::vector<std::string>& mat_names();

    Mat& at(int idx) { return mats[static_cast<size_t>(idx)]; }
    const Mat& at(int idx) const { return mats[static_cast<size_t>(idx)]; }
    static int rgcn_self_idx(int layer) { return kRgcnBase + 10 * layer; }
    static int rgcn_rel_idx(int layer, int relation) { return kRgcnBase + 10 * layer + 1 + relation; }

    size_t num_scalars() const;
};

struct ModelGrads {
    std::vector<Mat> g;
    static ModelGrads zeros_like(const ModelParams& p);
    void accumulate(const ModelGrads& other);
};

struct AdamState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    int64_t t = 0;
    static AdamState zeros_like(const ModelParams& p);
};

// Standard Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8.
void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state, double lr);

// Per-segment inputs to the spatial stack, precomputed from the network.
struct SegmentFeatures {
    std::vector<int> class_idx;
    std::vector<int> lanes_idx; // buckets {1,2,3,4+} -> 0..3
    std::vector<int> oneway_idx;
    std::vector<double> base_times;
};
SegmentFeatures segment_features(const netgraph::RoadNetwork& net);

int lanes_bucket(int lanes);

// Concatenated [class | lanes | oneway] embedding row for one segment.
Mat embed_segment_features(const netgraph::RoadSegment& seg, const ModelParams& params);

// Value-only forward of the 3-layer relational convolution stack (ReLU
// between layers, linear output).
Mat rgcn_forward(const netgraph::RelationalAdjacency& adj, const Mat& h0, const ModelParams& params);

// Value-only temporal branch: one-hot day/time + weather/holiday embeddings
// through a one-layer MLP with ReLU.
Mat temporal_embed(const TemporalContext& ctx, const ModelParams& params);

// Distribution heads on F = s_v[seg] + s_t for one segment.
std::pair<double, double> predict_params(const Mat& sv, const Mat& st, int seg_id,
                                         const ModelParams& params, double base_time);

struct TravelTimeTable {
    Mat mu;    // [|E| x 48] seconds
    Mat sigma; // [|E| x 48] seconds
    int64_t revision = 0;
};

// Route-level moments at one time step: mu_T = sum mu_i, sigma_T = sqrt(sum sigma_i^2).
std::pair<double, double> aggregate_route(std::span<const int> route, const TravelTimeTable& table,
                                          int time_step);

// Gaussian negative log-likelihood of the observed gap under the aggregated
// route distribution.
double pair_nll(double mu_T, double sigma_T, double t_obs);

// One weak-label training sample: the assigned route, the observed gap and
// its temporal context.
struct TrainSample {
    std::vector<int> route;
    double t_obs = 0.0;
    TemporalContext ctx;
    int64_t pair_id = 0;
};

// Spatial forward with a retained tape, so the adjoint of s_v accumulated
// across pairs can be pushed back through the relational stack once per batch.
class SpatialForward {
public:
    SpatialForward(const ModelParams& params, const SegmentFeatures& feats,
                   const netgraph::RelationalAdjacency& adj);
    const Mat& sv() const { return tape_.value(sv_node_); }
    // Adds d(loss)/d(spatial params) into `out` given d(loss)/d(s_v).
    void backward(Mat sv_adjoint, ModelGrads& out);

private:
    Tape tape_;
    std::vector<std::pair<int, int>> param_leaves_; // (registry idx, leaf id)
    int sv_node_ = -1;
};

// Mean NLL over the samples; when `grads` is non-null also accumulates the
// gradient of the mean NLL. Pair-level work is split over `threads` OpenMP
// threads in fixed contiguous chunks merged in thread order; threads == 1 is
// the serial reference path.
double batch_nll(const ModelParams& params, const SegmentFeatures& feats,
                 const netgraph::RelationalAdjacency& adj, std::span<const TrainSample> samples,
                 int threads, ModelGrads* grads);

// Materializes (mu, sigma) for every segment and time step under one context
// prototype (day/weather/holiday fixed, time step swept). Parallel over time
// steps; bitwise identical to the serial path.
TravelTimeTable materialize_table(const ModelParams& params, const SegmentFeatures& feats,
                                  const netgraph::RelationalAdjacency& adj,
                                  const TemporalContext& proto, int threads);

} // namespace sparse_eta::stmodel
