#include "openseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "openseg/errors.hpp"

namespace openseg {

namespace F = torch::nn::functional;

void GroundTruthSet::validate(int num_prompt_columns) const {
    const auto g = static_cast<std::int64_t>(class_ids.size());
    if (prompt_columns.size() != class_ids.size())
        throw ValidationError("ground truth: prompt_columns length differs from class_ids");
    if (g == 0) return;
    if (!masks.defined() || masks.dim() != 3 || masks.size(0) != g)
        throw ValidationError("ground truth: masks must be G x H x W with one mask per instance");
    auto areas = masks.reshape({g, -1}).sum(1);
    if ((areas <= 0).any().item<bool>()) throw ValidationError("ground truth: empty instance mask");
    for (int c : prompt_columns) {
        if (c < 0 || c >= num_prompt_columns)
            throw ValidationError("ground truth: prompt column " + std::to_string(c) + " outside [0, " +
                                  std::to_string(num_prompt_columns) + ")");
    }
}

GroundTruthSet GroundTruthSet::permuted(const std::vector<int>& order) const {
    GroundTruthSet out;
    std::vector<std::int64_t> idx(order.begin(), order.end());
    out.masks = masks.index_select(0, torch::tensor(idx, torch::kLong));
    for (int i : order) {
        out.class_ids.push_back(class_ids.at(static_cast<std::size_t>(i)));
        out.prompt_columns.push_back(prompt_columns.at(static_cast<std::size_t>(i)));
    }
    return out;
}

void LossWeights::validate() const {
    for (double w : {cls, bce, dice, no_object}) {
        if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and nonnegative");
    }
}

LossWeights LossWeights::scaled(double factor) const {
    LossWeights w = *this;
    w.cls *= factor;
    w.bce *= factor;
    w.dice *= factor;
    return w;
}

namespace {

struct CostTable {
    int rows = 0;  // queries
    int cols = 0;  // ground truths
    std::vector<double> data;
    double at(int k, int g) const { return data[static_cast<std::size_t>(k) * cols + g]; }
};

CostTable to_table(const Tensor& cost) {
    if (!cost.defined() || cost.dim() != 2) throw ShapeError("cost must be a 2-D matrix");
    CostTable t;
    t.rows = static_cast<int>(cost.size(0));
    t.cols = static_cast<int>(cost.size(1));
    auto c = cost.detach().to(torch::kFloat64).contiguous();
    t.data.assign(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
    for (double v : t.data) {
        if (!std::isfinite(v)) throw ValidationError("cost matrix contains a non-finite entry");
    }
    if (t.cols > t.rows)
        throw CapacityError("cannot match " + std::to_string(t.cols) + " ground truths to " + std::to_string(t.rows) +
                            " queries");
    return t;
}

struct Solution {
    std::vector<int> query_of_gt;
    std::vector<double> u, v;  // potentials for gts (1..n) and queries (1..m)
};

// Kuhn-Munkres with potentials, rows = ground truths, columns = queries.
Solution solve(const CostTable& t, const std::vector<int>& gts, const std::vector<int>& queries) {
    const int n = static_cast<int>(gts.size()), m = static_cast<int>(queries.size());
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
    auto a = [&](int i, int j) { return t.at(queries[static_cast<std::size_t>(j - 1)], gts[static_cast<std::size_t>(i - 1)]); };
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = kInf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = a(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    Solution s;
    s.query_of_gt.assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j) {
        if (p[static_cast<std::size_t>(j)] != 0)
            s.query_of_gt[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = queries[static_cast<std::size_t>(j - 1)];
    }
    s.u = std::move(u);
    s.v = std::move(v);
    return s;
}

double solution_cost(const CostTable& t, const std::vector<int>& gts, const std::vector<int>& query_of_gt) {
    double total = 0.0;
    for (std::size_t i = 0; i < gts.size(); ++i) total += t.at(query_of_gt[i], gts[i]);
    return total;
}

Assignment make_assignment(int num_queries, const std::vector<int>& query_of_gt) {
    Assignment a;
    std::vector<char> matched(static_cast<std::size_t>(num_queries), 0);
    for (std::size_t g = 0; g < query_of_gt.size(); ++g) {
        a.pairs.emplace_back(query_of_gt[g], static_cast<int>(g));
        matched[static_cast<std::size_t>(query_of_gt[g])] = 1;
    }
    std::sort(a.pairs.begin(), a.pairs.end());
    for (int k = 0; k < num_queries; ++k) {
        if (!matched[static_cast<std::size_t>(k)]) a.unmatched_queries.push_back(k);
    }
    return a;
}

std::vector<int> iota_vec(int n) {
    std::vector<int> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

Assignment hungarian_match(const Tensor& cost) {
    const auto t = to_table(cost);
    const int k = t.rows, g = t.cols;
    if (g == 0) return make_assignment(k, {});
    auto gts = iota_vec(g);
    auto queries = iota_vec(k);
    auto sol = solve(t, gts, queries);

    // Alternative optima can only use zero reduced-cost edges. If none exists
    // off the matching, the optimum is unique and no tie-break is needed.
    double scale = 1.0;
    for (double c : t.data) scale = std::max(scale, std::abs(c));
    const double tol = 1e-12 * scale * (g + 1);
    bool tie_possible = false;
    for (int gi = 0; gi < g && !tie_possible; ++gi) {
        for (int q = 0; q < k; ++q) {
            if (q == sol.query_of_gt[static_cast<std::size_t>(gi)]) continue;
            const double reduced = t.at(q, gi) - sol.u[static_cast<std::size_t>(gi) + 1] - sol.v[static_cast<std::size_t>(q) + 1];
            if (reduced <= tol) {
                tie_possible = true;
                break;
            }
        }
    }
    if (!tie_possible) return make_assignment(k, sol.query_of_gt);

    // Fix ground truths in order to the lowest query that still admits an optimum.
    std::vector<int> fixed(static_cast<std::size_t>(g), -1);
    std::vector<char> used(static_cast<std::size_t>(k), 0);
    double remaining = solution_cost(t, gts, sol.query_of_gt);
    for (int gi = 0; gi < g; ++gi) {
        std::vector<int> rest_gts(gts.begin() + gi + 1, gts.end());
        for (int q = 0; q < k; ++q) {
            if (used[static_cast<std::size_t>(q)]) continue;
            std::vector<int> rest_queries;
            for (int r = 0; r < k; ++r) {
                if (!used[static_cast<std::size_t>(r)] && r != q) rest_queries.push_back(r);
            }
            double sub = 0.0;
            if (!rest_gts.empty()) sub = solution_cost(t, rest_gts, solve(t, rest_gts, rest_queries).query_of_gt);
            if (t.at(q, gi) + sub <= remaining + tol) {
                fixed[static_cast<std::size_t>(gi)] = q;
                used[static_cast<std::size_t>(q)] = 1;
                remaining = sub;
                break;
            }
        }
        if (fixed[static_cast<std::size_t>(gi)] < 0) return make_assignment(k, sol.query_of_gt);
    }
    return make_assignment(k, fixed);
}

Assignment brute_force_match(const Tensor& cost) {
    if (cost.dim() == 2 && cost.size(1) > 7)
        throw SizeError("brute_force_match supports at most 7 ground truths, got " + std::to_string(cost.size(1)));
    const auto t = to_table(cost);
    const int k = t.rows, g = t.cols;
    std::vector<int> current(static_cast<std::size_t>(g), -1), best;
    std::vector<char> used(static_cast<std::size_t>(k), 0);
    double best_cost = std::numeric_limits<double>::infinity();
    // Depth-first over queries in ascending order: the first optimum found is
    // the lexicographically smallest one because only strict improvements replace it.
    auto recurse = [&](auto&& self, int gi) -> void {
        if (gi == g) {
            double total = 0.0;
            for (int i = 0; i < g; ++i) total += t.at(current[static_cast<std::size_t>(i)], i);
            if (total < best_cost) {
                best_cost = total;
                best = current;
            }
            return;
        }
        for (int q = 0; q < k; ++q) {
            if (used[static_cast<std::size_t>(q)]) continue;
            used[static_cast<std::size_t>(q)] = 1;
            current[static_cast<std::size_t>(gi)] = q;
            self(self, gi + 1);
            used[static_cast<std::size_t>(q)] = 0;
        }
    };
    recurse(recurse, 0);
    return make_assignment(k, g == 0 ? std::vector<int>{} : best);
}

double assignment_cost(const Tensor& cost, const Assignment& assignment) {
    auto c = cost.detach().to(torch::kFloat64).contiguous();
    std::vector<std::pair<int, int>> by_gt;
    for (auto [q, g] : assignment.pairs) by_gt.emplace_back(g, q);
    std::sort(by_gt.begin(), by_gt.end());
    double total = 0.0;
    const auto* data = c.data_ptr<double>();
    for (auto [g, q] : by_gt) total += data[static_cast<std::int64_t>(q) * c.size(1) + g];
    return total;
}

Tensor dice_loss(const Tensor& pred_logits, const Tensor& gt) {
    if (pred_logits.sizes() != gt.sizes()) throw ShapeError("dice_loss: prediction and target shapes differ");
    auto p = torch::sigmoid(pred_logits).flatten();
    auto g = gt.to(pred_logits.scalar_type()).flatten();
    return 1.0 - (2.0 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0);
}

Tensor mask_bce_loss(const Tensor& pred_logits, const Tensor& gt) {
    if (pred_logits.sizes() != gt.sizes()) throw ShapeError("mask_bce_loss: prediction and target shapes differ");
    return F::binary_cross_entropy_with_logits(pred_logits, gt.to(pred_logits.scalar_type()));
}

Tensor pairwise_dice(const Tensor& pred_logits, const Tensor& gt) {
    if (pred_logits.size(1) != gt.size(1)) throw ShapeError("pairwise_dice: pixel counts differ");
    auto p = torch::sigmoid(pred_logits);
    auto g = gt.to(pred_logits.scalar_type());
    auto num = 2.0 * p.matmul(g.t()) + 1.0;
    auto den = p.sum(1).unsqueeze(1) + g.sum(1).unsqueeze(0) + 1.0;
    return 1.0 - num / den;
}

Tensor pairwise_bce(const Tensor& pred_logits, const Tensor& gt) {
    if (pred_logits.size(1) != gt.size(1)) throw ShapeError("pairwise_bce: pixel counts differ");
    const double pixels = static_cast<double>(pred_logits.size(1));
    auto g = gt.to(pred_logits.scalar_type());
    // BCE(x, y) = softplus(x) - x * y
    return (F::softplus(pred_logits).sum(1).unsqueeze(1) - pred_logits.matmul(g.t())) / pixels;
}

ClassGroups ClassGroups::of(const std::vector<int>& column_class_ids) {
    ClassGroups groups;
    for (int c : column_class_ids) {
        auto it = std::find(groups.class_ids.begin(), groups.class_ids.end(), c);
        if (it == groups.class_ids.end()) {
            groups.column_group.push_back(groups.size());
            groups.class_ids.push_back(c);
        } else {
            groups.column_group.push_back(static_cast<int>(it - groups.class_ids.begin()));
        }
    }
    return groups;
}

Tensor reduce_by_class(const ScoreMatrix& scores, const ClassGroups& groups) {
    const int columns = scores.prompt_columns();
    if (static_cast<int>(groups.column_group.size()) != columns)
        throw ShapeError("reduce_by_class: group table does not match score columns");
    if (groups.size() == columns) {
        bool identity = true;
        for (int i = 0; i < columns; ++i) identity = identity && groups.column_group[static_cast<std::size_t>(i)] == i;
        if (identity) return scores.logits;
    }
    std::vector<std::vector<std::int64_t>> members(static_cast<std::size_t>(groups.size()));
    for (int i = 0; i < columns; ++i)
        members[static_cast<std::size_t>(groups.column_group[static_cast<std::size_t>(i)])].push_back(i);
    std::vector<Tensor> parts;
    for (const auto& cols : members) {
        auto sel = scores.logits.index_select(1, torch::tensor(cols, torch::kLong));
        parts.push_back(cols.size() == 1 ? sel : std::get<0>(sel.max(1, true)));
    }
    parts.push_back(scores.logits.narrow(1, columns, 1));
    return torch::cat(parts, 1);
}

Tensor classification_loss(const ScoreMatrix& scores, const Assignment& assignment, const GroundTruthSet& gt,
                           double no_object_weight) {
    const auto k = scores.logits.size(0);
    const int columns = scores.prompt_columns();
    auto groups = ClassGroups::of(scores.column_class_ids);
    const int no_object = groups.size();
    std::vector<std::int64_t> target(static_cast<std::size_t>(k), no_object);
    std::vector<double> weight(static_cast<std::size_t>(k), no_object_weight);
    for (auto [q, g] : assignment.pairs) {
        if (q < 0 || q >= k) throw ValidationError("assignment query index out of range");
        const int col = gt.prompt_columns.at(static_cast<std::size_t>(g));
        if (col < 0 || col >= columns)
            throw ValidationError("prompt column " + std::to_string(col) + " outside [0, " + std::to_string(columns) + ")");
        target[static_cast<std::size_t>(q)] = groups.column_group[static_cast<std::size_t>(col)];
        weight[static_cast<std::size_t>(q)] = 1.0;
    }
    auto logp = torch::log_softmax(reduce_by_class(scores, groups), 1);
    auto picked = logp.gather(1, torch::tensor(target, torch::kLong).unsqueeze(1)).squeeze(1);
    auto w = torch::tensor(weight, torch::TensorOptions().dtype(torch::kFloat64)).to(logp.scalar_type());
    return -(w * picked).sum() / static_cast<double>(k);
}

Tensor matching_cost(const HeadOutput& head, const GroundTruthSet& gt, const LossWeights& weights) {
    torch::NoGradGuard no_grad;
    const auto k = head.masks.logits.size(0);
    const int g = gt.size();
    if (g == 0) return torch::zeros({k, 0}, torch::kFloat64);
    if (gt.masks.size(1) != head.masks.logits.size(1) || gt.masks.size(2) != head.masks.logits.size(2))
        throw ShapeError("ground-truth masks and predicted masks differ in resolution");
    auto groups = ClassGroups::of(head.scores.column_class_ids);
    auto logp = torch::log_softmax(reduce_by_class(head.scores, groups), 1).to(torch::kFloat64);
    std::vector<std::int64_t> cols;
    for (int c : gt.prompt_columns) cols.push_back(groups.column_group.at(static_cast<std::size_t>(c)));
    auto cls = -logp.index_select(1, torch::tensor(cols, torch::kLong));
    auto pred = head.masks.logits.reshape({k, -1}).to(torch::kFloat64);
    auto target = gt.masks.reshape({g, -1}).to(torch::kFloat64);
    return weights.cls * cls + weights.bce * pairwise_bce(pred, target) + weights.dice * pairwise_dice(pred, target);
}

BlockLoss head_loss(const HeadOutput& head, const GroundTruthSet& gt, const LossWeights& weights) {
    BlockLoss out;
    out.assignment = hungarian_match(matching_cost(head, gt, weights));
    auto loss = weights.cls * classification_loss(head.scores, out.assignment, gt, weights.no_object);
    const int g = gt.size();
    if (g > 0) {
        std::vector<std::int64_t> qs, gs;
        for (auto [q, gi] : out.assignment.pairs) {
            qs.push_back(q);
            gs.push_back(gi);
        }
        const auto pixels = head.masks.logits.size(1) * head.masks.logits.size(2);
        auto pred = head.masks.logits.index_select(0, torch::tensor(qs, torch::kLong)).reshape({g, pixels});
        auto target = gt.masks.index_select(0, torch::tensor(gs, torch::kLong)).reshape({g, pixels}).to(pred.scalar_type());
        auto bce = F::binary_cross_entropy_with_logits(pred, target, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
                       .mean(1);
        auto p = torch::sigmoid(pred);
        auto dice = 1.0 - (2.0 * (p * target).sum(1) + 1.0) / (p.sum(1) + target.sum(1) + 1.0);
        loss = loss + (weights.bce * bce.sum() + weights.dice * dice.sum()) / static_cast<double>(g);
    }
    out.loss = loss;
    return out;
}

LossResult total_loss(const ForwardOutput& out, const GroundTruthSet& gt, const LossWeights& weights) {
    gt.validate(out.final.scores.prompt_columns());
    LossResult result;
    std::vector<Tensor> losses;
    for (const auto& aux : out.aux) {
        auto b = head_loss(aux, gt, weights);
        result.per_head.push_back(b.loss.item<double>());
        losses.push_back(b.loss);
    }
    auto fin = head_loss(out.final, gt, weights);
    result.per_head.push_back(fin.loss.item<double>());
    losses.push_back(fin.loss);
    result.assignment = fin.assignment;
    result.loss = torch::stack(losses).mean();
    return result;
}

}  // namespace openseg
