#pragma once

// Set-prediction objective: bipartite matching between object queries and
// ground-truth instances, classification cross-entropy, mask BCE and Dice.

#include <utility>
#include <vector>

#include <torch/torch.h>

#include "openseg/segdecoder.hpp"

namespace openseg {

struct GroundTruthSet {
    Tensor masks;  // G x H' x W', values in {0, 1}
    std::vector<int> class_ids;
    std::vector<int> prompt_columns;

    int size() const { return static_cast<int>(class_ids.size()); }
    /// Throws ValidationError on inconsistent lengths, empty masks or out-of-range columns.
    void validate(int num_prompt_columns) const;
    /// Copy with instances reordered: result[i] = this[order[i]].
    GroundTruthSet permuted(const std::vector<int>& order) const;
};

struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (query, gt), sorted by query
    std::vector<int> unmatched_queries;
};

struct LossWeights {
    double cls = 2.0;
    double bce = 5.0;
    double dice = 5.0;
    double no_object = 0.1;

    void validate() const;
    LossWeights scaled(double factor) const;
};

/// Minimum-cost assignment of every column (ground truth) of a K x G cost
/// matrix to a distinct row (query). Among optimal assignments the one whose
/// query vector (q(gt0), q(gt1), ...) is lexicographically smallest is returned.
Assignment hungarian_match(const Tensor& cost);

/// Exhaustive reference for hungarian_match; same tie rule. Requires G <= 7.
Assignment brute_force_match(const Tensor& cost);

/// Sum of matched costs, accumulated in ground-truth order.
double assignment_cost(const Tensor& cost, const Assignment& assignment);

/// 1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1), p = sigmoid(logits).
Tensor dice_loss(const Tensor& pred_logits, const Tensor& gt);
/// Mean binary cross-entropy of sigmoid(logits) against a binary grid.
Tensor mask_bce_loss(const Tensor& pred_logits, const Tensor& gt);

/// K x G matrices of dice_loss / mask_bce_loss between every prediction and
/// every ground truth. Inputs are flattened K x P and G x P.
Tensor pairwise_dice(const Tensor& pred_logits, const Tensor& gt);
Tensor pairwise_bce(const Tensor& pred_logits, const Tensor& gt);

/// Prompt columns grouped by class id, in order of first appearance.
struct ClassGroups {
    std::vector<int> class_ids;     // one per group
    std::vector<int> column_group;  // one per prompt column

    int size() const { return static_cast<int>(class_ids.size()); }
    static ClassGroups of(const std::vector<int>& column_class_ids);
};

/// Max-reduce the prompt columns sharing a class id: K x (groups + 1), last
/// column no-object. With distinct class ids this is the identity.
Tensor reduce_by_class(const ScoreMatrix& scores, const ClassGroups& groups);

/// Softmax cross-entropy over class groups + no-object. Matched queries target
/// the group of their ground truth's prompt column; unmatched ones target
/// no-object with weight `no_object_weight`. Mean over queries.
Tensor classification_loss(const ScoreMatrix& scores, const Assignment& assignment, const GroundTruthSet& gt,
                           double no_object_weight = 0.1);

/// K x G matching cost (detached, double) for one head output.
Tensor matching_cost(const HeadOutput& head, const GroundTruthSet& gt, const LossWeights& weights);

struct BlockLoss {
    Tensor loss;
    Assignment assignment;
};

/// Matched loss for a single head output.
BlockLoss head_loss(const HeadOutput& head, const GroundTruthSet& gt, const LossWeights& weights);

struct LossResult {
    Tensor loss;              // mean over the final and every auxiliary head
    Assignment assignment;    // final head's assignment
    std::vector<double> per_head;
};

LossResult total_loss(const ForwardOutput& out, const GroundTruthSet& gt, const LossWeights& weights);

}  // namespace openseg
