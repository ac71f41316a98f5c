#include "crfill/losses.hpp"

#include <stdexcept>

namespace crfill {

void LossWeights::validate() const {
  if (!(lambda >= 0)) throw std::invalid_argument("lambda must be >= 0");
  if (!(beta >= 0)) throw std::invalid_argument("beta must be >= 0");
  if (!(alpha > 0)) throw std::invalid_argument("alpha must be > 0");
}

template <typename T>
Var<T> d_loss(const Var<T>& real_scores, const Var<T>& fake_scores) {
  if (real_scores.shape() != fake_scores.shape()) {
    throw DimensionError("d_loss: real " + to_string(real_scores.shape()) + " vs fake " +
                         to_string(fake_scores.shape()));
  }
  return add(hinge_mean(real_scores, T(1)), hinge_mean(fake_scores, T(-1)));
}

template <typename T>
InpaintLoss<T> g_inpaint_loss(const Var<T>& y, const Var<T>& u, const Tensor<T>& mask, const Tensor<T>& x,
                              const Discriminate<T>& discriminate, T beta) {
  if (y.shape() != x.shape()) {
    throw DimensionError("g_inpaint_loss: Y " + to_string(y.shape()) + " vs X " + to_string(x.shape()));
  }
  InpaintLoss<T> out;
  out.adversarial = hinge_mean(discriminate(compose(y, u, mask)), T(1));
  out.l1 = mean_abs_diff(y, Var<T>(x));
  out.total = add(out.adversarial, scale(out.l1, beta));
  return out;
}

template <typename T>
bool CrLoss<T>::all_skipped() const {
  for (bool s : skipped) {
    if (!s) return false;
  }
  return true;
}

namespace {
template <typename T>
Tensor<T> select_items(const Tensor<T>& t, const std::vector<int>& keep) {
  NoGradGuard guard;
  return select_batch(Var<T>(t), keep).value();
}
}  // namespace

template <typename T>
CrLoss<T> cr_loss(const Var<T>& u, const Tensor<T>& mask, const Tensor<T>& x, const SimilarityMap<T>& sim,
                  const Reconstruct<T>& reconstruct, const Discriminate<T>& discriminate, T beta) {
  const int batch = u.dim(0);
  if (static_cast<int>(sim.known.size()) != batch || sim.batch() != batch) {
    throw DimensionError("cr_loss: similarity batch does not match U");
  }
  CrLoss<T> out;
  std::vector<int> keep;
  for (int n = 0; n < batch; ++n) {
    const bool skip = !has_known(sim.known[static_cast<std::size_t>(n)]);
    out.skipped.push_back(skip);
    if (!skip) keep.push_back(n);
  }
  if (keep.empty()) {
    out.value = Var<T>(Tensor<T>({1}, T(0)));
    return out;
  }
  if (static_cast<int>(keep.size()) == batch) {
    const Var<T> aux = reconstruct(u, mask, sim);
    out.terms = g_inpaint_loss(aux, u, mask, x, discriminate, beta);
  } else {
    SimilarityMap<T> sub{sim.geometry, select_batch(sim.values, keep), {}};
    for (int n : keep) sub.known.push_back(sim.known[static_cast<std::size_t>(n)]);
    const Var<T> su = select_batch(u, keep);
    const Tensor<T> sm = select_items(mask, keep);
    const Var<T> aux = reconstruct(su, sm, sub);
    out.terms = g_inpaint_loss(aux, su, sm, select_items(x, keep), discriminate, beta);
  }
  out.value = out.terms.total;
  return out;
}

template <typename T>
Var<T> g_total_loss(const Var<T>& inpaint, const Var<T>& cr, T lambda) {
  if (lambda == T(0)) return inpaint;
  return add(inpaint, scale(cr, lambda));
}

template <typename T>
Var<T> coarse_loss(const Var<T>& coarse, const Tensor<T>& x, T beta) {
  return scale(mean_abs_diff(coarse, Var<T>(x)), beta);
}

#define CRFILL_INSTANTIATE_LOSSES(T)                                                                       \
  template Var<T> d_loss(const Var<T>&, const Var<T>&);                                                    \
  template InpaintLoss<T> g_inpaint_loss(const Var<T>&, const Var<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         const Discriminate<T>&, T);                                       \
  template struct CrLoss<T>;                                                                               \
  template CrLoss<T> cr_loss(const Var<T>&, const Tensor<T>&, const Tensor<T>&, const SimilarityMap<T>&,   \
                             const Reconstruct<T>&, const Discriminate<T>&, T);                            \
  template Var<T> g_total_loss(const Var<T>&, const Var<T>&, T);                                           \
  template Var<T> coarse_loss(const Var<T>&, const Tensor<T>&, T);

CRFILL_INSTANTIATE_LOSSES(float)
CRFILL_INSTANTIATE_LOSSES(double)

}  // namespace crfill
