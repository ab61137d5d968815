#include "openseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "openseg/errors.hpp"

namespace openseg {

namespace {

Tensor as_labels(const Tensor& t) { return t.to(torch::kLong); }

Tensor as_mask(const Tensor& t) { return t.to(torch::kBool); }

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

IouResult miou(const Tensor& pred_semantic, const Tensor& gt_semantic, int n_classes) {
    IouAccumulator acc(n_classes);
    acc.add(pred_semantic, gt_semantic);
    return acc.result();
}

IouAccumulator::IouAccumulator(int n_classes)
    : n_classes_(n_classes),
      inter_(static_cast<std::size_t>(n_classes), 0.0),
      uni_(static_cast<std::size_t>(n_classes), 0.0),
      gt_count_(static_cast<std::size_t>(n_classes), 0.0) {}

void IouAccumulator::add(const Tensor& pred_semantic, const Tensor& gt_semantic) {
    if (pred_semantic.sizes() != gt_semantic.sizes()) throw ShapeError("miou: prediction and ground truth shapes differ");
    auto pred = as_labels(pred_semantic);
    auto gt = as_labels(gt_semantic);
    auto valid = gt != kIgnoreLabel;
    for (int c = 0; c < n_classes_; ++c) {
        auto p = (pred == c) & valid;
        auto g = (gt == c) & valid;
        const auto gc = g.sum().item<double>();
        gt_count_[static_cast<std::size_t>(c)] += gc;
        inter_[static_cast<std::size_t>(c)] += (p & g).sum().item<double>();
        uni_[static_cast<std::size_t>(c)] += (p | g).sum().item<double>();
    }
}

IouResult IouAccumulator::result() const {
    IouResult r;
    double sum = 0.0;
    for (int c = 0; c < n_classes_; ++c) {
        if (gt_count_[static_cast<std::size_t>(c)] <= 0.0) continue;
        const double iou = inter_[static_cast<std::size_t>(c)] / uni_[static_cast<std::size_t>(c)];
        r.per_class[c] = iou;
        sum += iou;
    }
    r.miou = r.per_class.empty() ? 0.0 : sum / static_cast<double>(r.per_class.size());
    return r;
}

double mask_iou(const Tensor& a, const Tensor& b) {
    if (a.sizes() != b.sizes()) throw ShapeError("mask_iou: shapes differ");
    auto ma = as_mask(a), mb = as_mask(b);
    const double uni = (ma | mb).sum().item<double>();
    if (uni <= 0.0) return 0.0;
    return (ma & mb).sum().item<double>() / uni;
}

void check_partition(const std::vector<Segment>& segments) {
    if (segments.empty()) return;
    auto cover = torch::zeros(segments.front().mask.sizes(), torch::kInt32);
    for (const auto& s : segments) {
        if (s.mask.sizes() != cover.sizes()) throw ShapeError("segments have different shapes");
        cover += as_mask(s.mask).to(torch::kInt32);
    }
    if ((cover > 1).any().item<bool>()) throw ValidationError("segments of one partition overlap");
}

PqResult panoptic_quality(const std::vector<Segment>& pred, const std::vector<Segment>& gt) {
    check_partition(pred);
    check_partition(gt);
    PqResult r;
    std::vector<char> pred_matched(pred.size(), 0);
    for (const auto& g : gt) {
        bool matched = false;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (pred_matched[i] || pred[i].class_id != g.class_id) continue;
            const double iou = mask_iou(pred[i].mask, g.mask);
            // IoU > 0.5 makes the match unique for non-overlapping partitions.
            if (iou > 0.5) {
                pred_matched[i] = 1;
                matched = true;
                r.tp += 1;
                r.iou_sum += iou;
                break;
            }
        }
        if (!matched) r.fn += 1;
    }
    r.fp = static_cast<int>(std::count(pred_matched.begin(), pred_matched.end(), 0));
    const double denom = r.tp + 0.5 * r.fp + 0.5 * r.fn;
    if (denom == 0.0) {
        r.pq = r.sq = r.rq = 1.0;
        return r;
    }
    r.rq = r.tp / denom;
    r.sq = r.tp > 0 ? r.iou_sum / r.tp : 0.0;
    r.pq = r.iou_sum / denom;
    return r;
}

void PqAccumulator::add(const std::vector<Segment>& pred, const std::vector<Segment>& gt) {
    auto r = panoptic_quality(pred, gt);
    totals_.tp += r.tp;
    totals_.fp += r.fp;
    totals_.fn += r.fn;
    totals_.iou_sum += r.iou_sum;
}

PqResult PqAccumulator::result() const {
    PqResult r = totals_;
    const double denom = r.tp + 0.5 * r.fp + 0.5 * r.fn;
    if (denom == 0.0) {
        r.pq = r.sq = r.rq = 1.0;
        return r;
    }
    r.rq = r.tp / denom;
    r.sq = r.tp > 0 ? r.iou_sum / r.tp : 0.0;
    r.pq = r.iou_sum / denom;
    return r;
}

std::map<double, double> average_precision(const std::vector<ImageDetections>& images,
                                           const std::vector<double>& iou_thresholds) {
    std::vector<int> classes;
    for (const auto& img : images) {
        for (const auto& d : img.predictions) {
            if (!(d.confidence >= 0.0 && d.confidence <= 1.0))
                throw ValidationError("detection confidence outside [0, 1]");
        }
        for (const auto& g : img.ground_truth) classes.push_back(g.class_id);
    }
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

    struct Candidate {
        double confidence;
        std::size_t image, index;
    };
    std::map<double, double> out;
    for (double thr : iou_thresholds) {
        double sum_ap = 0.0;
        for (int c : classes) {
            std::vector<Candidate> cands;
            int n_gt = 0;
            for (std::size_t i = 0; i < images.size(); ++i) {
                for (std::size_t j = 0; j < images[i].predictions.size(); ++j) {
                    if (images[i].predictions[j].class_id == c) cands.push_back({images[i].predictions[j].confidence, i, j});
                }
                for (const auto& g : images[i].ground_truth) n_gt += g.class_id == c ? 1 : 0;
            }
            std::stable_sort(cands.begin(), cands.end(),
                             [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
            std::vector<std::vector<char>> taken(images.size());
            for (std::size_t i = 0; i < images.size(); ++i) taken[i].assign(images[i].ground_truth.size(), 0);
            std::vector<double> precision, recall;
            int tp = 0, fp = 0;
            for (const auto& cand : cands) {
                const auto& det = images[cand.image].predictions[cand.index];
                const auto& gts = images[cand.image].ground_truth;
                double best = -1.0;
                std::size_t best_g = 0;
                for (std::size_t g = 0; g < gts.size(); ++g) {
                    if (gts[g].class_id != c || taken[cand.image][g]) continue;
                    const double iou = mask_iou(det.mask, gts[g].mask);
                    if (iou >= thr && iou > best) {
                        best = iou;
                        best_g = g;
                    }
                }
                if (best >= 0.0) {
                    taken[cand.image][best_g] = 1;
                    ++tp;
                } else {
                    ++fp;
                }
                precision.push_back(static_cast<double>(tp) / (tp + fp));
                recall.push_back(static_cast<double>(tp) / n_gt);
            }
            // precision envelope from the right, then sum over recall increments
            for (std::size_t i = precision.size(); i > 1; --i)
                precision[i - 2] = std::max(precision[i - 2], precision[i - 1]);
            double ap = 0.0, prev_recall = 0.0;
            for (std::size_t i = 0; i < precision.size(); ++i) {
                ap += (recall[i] - prev_recall) * precision[i];
                prev_recall = recall[i];
            }
            sum_ap += ap;
        }
        out[thr] = classes.empty() ? 0.0 : sum_ap / static_cast<double>(classes.size());
    }
    return out;
}

std::string MetricReport::to_text(const std::vector<std::string>& class_names) const {
    std::ostringstream os;
    os << "miou=" << fmt(miou) << "\n";
    for (const auto& [c, v] : per_class_iou) {
        const std::string name = c >= 0 && c < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(c)]
                                                                                  : std::to_string(c);
        os << "iou." << name << "=" << fmt(v) << "\n";
    }
    os << "pq=" << fmt(pq) << "\n" << "sq=" << fmt(sq) << "\n" << "rq=" << fmt(rq) << "\n";
    for (const auto& [t, v] : ap) {
        char key[32];
        std::snprintf(key, sizeof(key), "ap%.0f", t * 100.0);
        os << key << "=" << fmt(v) << "\n";
    }
    return os.str();
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["miou"] = miou;
    for (const auto& [c, v] : per_class_iou) j["per_class_iou"][std::to_string(c)] = v;
    j["pq"] = pq;
    j["sq"] = sq;
    j["rq"] = rq;
    for (const auto& [t, v] : ap) {
        char key[32];
        std::snprintf(key, sizeof(key), "%.2f", t);
        j["ap"][key] = v;
    }
    return j.dump(2);
}

}  // namespace openseg
