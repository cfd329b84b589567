#pragma once

#include "pdseg/tensor.hpp"

namespace pdseg::objectives {

/// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline constexpr double kBceEps = 1e-7;

/// Class-balanced binary cross-entropy with natural logs:
///   L = -sum((1-m) log(1-p)) / |m=0| - sum(m log p) / |m=1|
/// `pred` holds probabilities, `gt` binary targets; both [H,W], [N,H,W] or
/// [N,1,H,W]. Batched inputs give the mean of the per-sample losses.
/// Throws DegenerateMaskError when a target is all foreground or all
/// background.
Tensor balanced_bce(const Tensor& pred, const Tensor& gt);

/// balanced_bce(sigmoid(logits), gt).
Tensor balanced_bce_with_logits(const Tensor& logits, const Tensor& gt);

/// |A and B| / |A or B| for masks thresholded at 0.5. Empty prediction is
/// allowed; an empty ground truth throws DegenerateMaskError.
double iou(const Tensor& pred_binary, const Tensor& gt_binary);

/// Relative drop from seen to unseen classes, in percent:
/// 100 * (seen - unseen) / seen. Throws DegenerateMetricError if seen <= 0.
double delta_percent(double iou_seen, double iou_unseen);

/// 1 where value > threshold (values equal to the threshold count as 0).
Tensor binarize(const Tensor& probs, double threshold = 0.5);

}  // namespace pdseg::objectives
