#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mneme/rng.hpp"
#include "mneme/tensor.hpp"

// Central-difference gradient oracle. `build` must reconstruct the scalar loss
// from the given leaves on every call; the tape is rewound to `mark` between
// evaluations so leaf ids stay valid.
namespace gradcheck {

struct Report {
  double max_rel = 0.0;
  std::string where;
  long checked = 0;
};

inline double rel_err(double a, double b) {
  // denominator floored so FD noise on near-zero grads stays below tol
  const double denom = std::max(std::abs(a) + std::abs(b), 1e-3);
  return std::abs(a - b) / denom;
}

inline Report check(mneme::TapeT<double>& tape,
                    const std::vector<mneme::TensorT<double>>& leaves,
                    const std::function<mneme::TensorT<double>()>& build,
                    double h = 1e-5) {
  const size_t mark = tape.mark();
  auto loss = build();
  tape.backward(loss);

  std::vector<Eigen::ArrayXd> analytic;
  for (const auto& p : leaves) {
    if (p.grad().size() == 0)
      analytic.push_back(Eigen::ArrayXd::Zero(p.numel()));
    else
      analytic.push_back(p.grad());
  }
  tape.zero_grad();
  tape.rewind(mark);

  Report rep;
  for (size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& v = leaves[pi].value();
    for (long i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + h;
      const double fp = build().item();
      tape.rewind(mark);
      v[i] = keep - h;
      const double fm = build().item();
      tape.rewind(mark);
      v[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double e = rel_err(analytic[pi][i], fd);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.where = "leaf " + std::to_string(pi) + " elem " + std::to_string(i) +
                    " analytic=" + std::to_string(analytic[pi][i]) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  return rep;
}

inline mneme::TensorT<double> randn_leaf(mneme::TapeT<double>& tape,
                                         const mneme::Shape& shape,
                                         mneme::Rng& rng, double scale = 1.0,
                                         bool requires_grad = true) {
  Eigen::ArrayXd a(mneme::numel_of(shape));
  for (long i = 0; i < a.size(); ++i) a[i] = rng.normal() * scale;
  return tape.leaf(shape, a, requires_grad);
}

}  // namespace gradcheck
