#pragma once

#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace openseg {

using torch::Tensor;

/// Semantic label for pixels that belong to no class. Counts as a negative for every class.
constexpr int kNoClass = -1;
/// Ground-truth label excluded from evaluation entirely.
constexpr int kIgnoreLabel = 255;

struct IouResult {
    double miou = 0.0;
    std::map<int, double> per_class;
};

/// Mean IoU over classes in [0, n_classes) that occur in `gt`. Pixels labelled
/// kIgnoreLabel in `gt` are excluded from both prediction and ground truth.
IouResult miou(const Tensor& pred_semantic, const Tensor& gt_semantic, int n_classes);

/// Dataset-level mIoU: intersections and unions are summed over images before dividing.
class IouAccumulator {
public:
    explicit IouAccumulator(int n_classes);
    void add(const Tensor& pred_semantic, const Tensor& gt_semantic);
    IouResult result() const;

private:
    int n_classes_;
    std::vector<double> inter_, uni_, gt_count_;
};

struct Segment {
    Tensor mask;  // H x W bool
    int class_id = 0;
};

struct PqResult {
    double pq = 0.0, sq = 0.0, rq = 0.0;
    int tp = 0, fp = 0, fn = 0;
    double iou_sum = 0.0;
};

/// Throws ValidationError if two segments of one partition overlap.
void check_partition(const std::vector<Segment>& segments);

/// Panoptic quality with the strict IoU > 0.5 matching rule.
PqResult panoptic_quality(const std::vector<Segment>& pred, const std::vector<Segment>& gt);

/// Pools TP / FP / FN counts and TP IoU sums over images.
class PqAccumulator {
public:
    void add(const std::vector<Segment>& pred, const std::vector<Segment>& gt);
    PqResult result() const;

private:
    PqResult totals_;
};

struct Detection {
    Tensor mask;  // H x W bool
    int class_id = 0;
    double confidence = 0.0;
};

struct ImageDetections {
    std::vector<Detection> predictions;
    std::vector<Segment> ground_truth;
};

/// Mask AP per IoU threshold: greedy matching in descending confidence, area
/// under the interpolated precision-recall curve, mean over classes present in
/// the ground truth.
std::map<double, double> average_precision(const std::vector<ImageDetections>& images,
                                           const std::vector<double>& iou_thresholds = {0.5, 0.75});

double mask_iou(const Tensor& a, const Tensor& b);

struct MetricReport {
    double miou = 0.0;
    std::map<int, double> per_class_iou;
    double pq = 0.0, sq = 0.0, rq = 0.0;
    std::map<double, double> ap;

    /// One `key=value` line per metric.
    std::string to_text(const std::vector<std::string>& class_names = {}) const;
    std::string to_json() const;
};

}  // namespace openseg
