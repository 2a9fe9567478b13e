#pragma once

#include <Eigen/Core>

namespace kkl {

template <class S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

using Eigen::MatrixXd;
using Eigen::VectorXd;

}  // namespace kkl
