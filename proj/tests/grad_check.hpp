#pragma once

// Central finite-difference check of a denoiser's parameter gradients.

#include <algorithm>
#include <vector>

#include "dbc/diffusion.hpp"
#include "test_util.hpp"

namespace testutil {

struct GradCheck {
  double worst_rel = 0.0;
  std::size_t checked = 0;
};

inline GradCheck check_denoiser_gradients(dbc::diffusion::Denoiser& model, dbc::Rng& rng, std::size_t batch = 5,
                                          double step = 1e-5) {
  using dbc::Matrix;
  const auto& s = model.spec();
  const Matrix obs = random_matrix(batch, s.obs_dim, rng);
  const Matrix noisy = random_matrix(batch, s.action_dim, rng, -2.0, 2.0);
  const Matrix r = random_matrix(batch, s.action_dim, rng);
  std::vector<int> taus(batch);
  std::vector<std::uint8_t> mask(batch, 0);
  for (std::size_t i = 0; i < batch; ++i) taus[i] = static_cast<int>(rng.integer(1, s.steps));
  mask[batch - 1] = 1;  // one unconditional row

  auto loss = [&]() {
    dbc::diffusion::Tape t;
    const Matrix y = model.forward_train(obs, mask, noisy, taus, t);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.flat().size(); ++i) acc += y.flat()[i] * r.flat()[i];
    return acc;
  };

  model.zero_grad();
  dbc::diffusion::Tape tape;
  model.forward_train(obs, mask, noisy, taus, tape);
  model.backward(tape, r);

  GradCheck out;
  for (auto& p : model.params())
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + step;
      const double up = loss();
      p.value[i] = keep - step;
      const double down = loss();
      p.value[i] = keep;
      out.worst_rel = std::max(out.worst_rel, rel_err((up - down) / (2 * step), p.grad[i]));
      ++out.checked;
    }
  return out;
}

}  // namespace testutil
