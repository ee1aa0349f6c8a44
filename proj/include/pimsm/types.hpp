#pragma once

#include <Eigen/Dense>

namespace pimsm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

}  // namespace pimsm
