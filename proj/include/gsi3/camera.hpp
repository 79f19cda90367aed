#pragma once

#include <cmath>
#include <stdexcept>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace gsi3 {

/// Pinhole camera. Camera space is x right, y down, z forward; a world point X maps to
/// rotation * X + translation. Pixel (x, y) covers [x, x+1) x [y, y+1), so its center
/// sits at continuous image coordinate (x + 0.5, y + 0.5).
struct Camera {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    int width = 1, height = 1;

    [[nodiscard]] Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const {
        return rotation * world + translation;
    }
    [[nodiscard]] Eigen::Vector3d to_world(const Eigen::Vector3d& cam) const {
        return rotation.transpose() * (cam - translation);
    }
    [[nodiscard]] Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
    [[nodiscard]] Eigen::Vector3d forward() const { return rotation.row(2).transpose(); }

    /// Continuous image coordinates of a camera-space point.
    [[nodiscard]] Eigen::Vector2d project(const Eigen::Vector3d& cam) const {
        return {fx * cam.x() / cam.z() + cx, fy * cam.y() / cam.z() + cy};
    }

    /// Camera-space direction with unit z through the center of pixel (px, py).
    [[nodiscard]] Eigen::Vector3d pixel_ray(int px, int py) const {
        return {(px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1.0};
    }

    void validate() const {
        if (!(fx > 0.0 && fy > 0.0)) throw std::invalid_argument("Camera: focal lengths must be positive");
        if (width < 1 || height < 1) throw std::invalid_argument("Camera: empty image");
        const Eigen::Matrix3d err = rotation * rotation.transpose() - Eigen::Matrix3d::Identity();
        if (err.cwiseAbs().maxCoeff() > 1e-6 || rotation.determinant() < 0.0)
            throw std::invalid_argument("Camera: rotation is not orthonormal");
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image y points away from it).
    static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                          const Eigen::Vector3d& up, int width, int height, double focal) {
        const Eigen::Vector3d f = (target - eye).normalized();
        Eigen::Vector3d r = f.cross(up);
        if (r.norm() < 1e-9) r = f.cross(Eigen::Vector3d::UnitY());
        r.normalize();
        const Eigen::Vector3d d = f.cross(r);
        Camera cam;
        cam.rotation.row(0) = r.transpose();
        cam.rotation.row(1) = d.transpose();
        cam.rotation.row(2) = f.transpose();
        cam.translation = -cam.rotation * eye;
        cam.width = width;
        cam.height = height;
        cam.fx = cam.fy = focal;
        cam.cx = width / 2.0;
        cam.cy = height / 2.0;
        return cam;
    }
};

/// Rotation matrix of a (w, x, y, z) quaternion after normalization.
inline Eigen::Matrix3d quat_to_rotation(const Eigen::Vector4d& q_raw) {
    const Eigen::Vector4d q = q_raw.normalized();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Gradient of a scalar through quat_to_rotation: given dL/dR, returns dL/dq_raw.
inline Eigen::Vector4d quat_to_rotation_backward(const Eigen::Vector4d& q_raw, const Eigen::Matrix3d& g) {
    const double n = q_raw.norm();
    const Eigen::Vector4d q = q_raw / n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Vector4d dq;
    dq[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    dq[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                 w * g(2, 1) - 2 * x * g(2, 2));
    dq[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                 z * g(2, 1) - 2 * y * g(2, 2));
    dq[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                 x * g(2, 0) + y * g(2, 1));
    return (dq - q * q.dot(dq)) / n;
}

/// (w, x, y, z) quaternion of a rotation about a unit axis.
inline Eigen::Vector4d axis_angle_quat(const Eigen::Vector3d& axis, double angle) {
    const Eigen::Vector3d a = axis.normalized() * std::sin(angle / 2);
    return {std::cos(angle / 2), a.x(), a.y(), a.z()};
}

} // namespace gsi3
