#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace elfin {

using Vec3  = Eigen::Vector3d;
using Mat3  = Eigen::Matrix3d;
using VecX  = Eigen::VectorXd;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using SpMat = Eigen::SparseMatrix<double>;

inline Vec3 node_of(const VecX& positions, int v) {
    return positions.segment<3>(3 * v);
}

} // namespace elfin
