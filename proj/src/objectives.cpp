#include "pdseg/objectives.hpp"

#include <string>
#include <vector>

#include "pdseg/errors.hpp"

namespace pdseg::objectives {

namespace {

std::size_t batch_of(const Tensor& t) {
  switch (t.dim()) {
    case 2: return 1;
    case 3: return t.size(0);
    case 4:
      if (t.size(1) != 1) break;
      return t.size(0);
    default: break;
  }
  throw ShapeError("mask tensor must be [H,W], [N,H,W] or [N,1,H,W], got " +
                   shape_str(t.shape()));
}

}  // namespace

Tensor balanced_bce(const Tensor& pred, const Tensor& gt) {
  if (pred.numel() != gt.numel() || batch_of(pred) != batch_of(gt))
    throw ShapeError("balanced_bce shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  const std::size_t n = batch_of(pred);
  const std::size_t per = pred.numel() / n;
  const auto m = gt.data();
  std::vector<double> w_fg(m.size()), w_bg(m.size());
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t fg = 0;
    for (std::size_t i = 0; i < per; ++i) fg += m[b * per + i] > 0.5 ? 1 : 0;
    if (fg == 0 || fg == per)
      throw DegenerateMaskError("balanced_bce needs both foreground and background pixels (sample " +
                                std::to_string(b) + " has " + std::to_string(fg) + "/" +
                                std::to_string(per) + " foreground)");
    const double inv_fg = 1.0 / static_cast<double>(fg);
    const double inv_bg = 1.0 / static_cast<double>(per - fg);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < per; ++i) {
      const bool on = m[b * per + i] > 0.5;
      w_fg[b * per + i] = on ? inv_fg * inv_n : 0.0;
      w_bg[b * per + i] = on ? 0.0 : inv_bg * inv_n;
    }
  }
  const Shape flat{pred.numel()};
  const Tensor p = clamp(reshape(pred, flat), kBceEps, 1.0 - kBceEps);
  const Tensor fg_term = sum(Tensor(flat, std::move(w_fg)) * log(p));
  const Tensor bg_term = sum(Tensor(flat, std::move(w_bg)) * log(rsub(1.0, p)));
  return neg(fg_term + bg_term);
}

Tensor balanced_bce_with_logits(const Tensor& logits, const Tensor& gt) {
  return balanced_bce(sigmoid(logits), gt);
}

double iou(const Tensor& pred_binary, const Tensor& gt_binary) {
  if (pred_binary.numel() != gt_binary.numel())
    throw ShapeError("iou shape mismatch: " + shape_str(pred_binary.shape()) + " vs " +
                     shape_str(gt_binary.shape()));
  const auto a = pred_binary.data();
  const auto b = gt_binary.data();
  std::size_t inter = 0, uni = 0, gt_count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] > 0.5, pb = b[i] > 0.5;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
    gt_count += pb ? 1 : 0;
  }
  if (gt_count == 0) throw DegenerateMaskError("iou with an empty ground-truth mask");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double delta_percent(double iou_seen, double iou_unseen) {
  if (!(iou_seen > 0.0))
    throw DegenerateMetricError("delta_percent needs a positive seen IoU, got " +
                                std::to_string(iou_seen));
  return 100.0 * (iou_seen - iou_unseen) / iou_seen;
}

Tensor binarize(const Tensor& probs, double threshold) {
  std::vector<double> out(probs.numel());
  const auto p = probs.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] > threshold ? 1.0 : 0.0;
  return Tensor(probs.shape(), std::move(out));
}

}  // namespace pdseg::objectives
