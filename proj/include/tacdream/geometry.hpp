#pragma once

// SE(3) poses, pinhole cameras, and the projection of the tactile sensor's
// oriented box into per-view pixel bounding boxes and patch-grid masks.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tacdream/common.hpp"

namespace tacdream::geometry {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 mat3_mul_vec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            c[i * 3 + j] = s;
        }
    return c;
}

inline Mat3 mat3_transpose(const Mat3& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

inline Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

struct Pose {
    Mat3 rotation = mat3_identity();
    Vec3 translation = {0, 0, 0};

    static Pose identity() { return {}; }

    static Pose from_rpy(double roll, double pitch, double yaw, const Vec3& t) {
        const double cr = std::cos(roll), sr = std::sin(roll);
        const double cp = std::cos(pitch), sp = std::sin(pitch);
        const double cy = std::cos(yaw), sy = std::sin(yaw);
        // Rz(yaw) * Ry(pitch) * Rx(roll)
        Mat3 r = {cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
                  sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
                  -sp,     cp * sr,                cp * cr};
        return {r, t};
    }

    Vec3 apply(const Vec3& p) const {
        Vec3 r = mat3_mul_vec(rotation, p);
        return {r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]};
    }

    bool valid(double tol = 1e-6) const {
        const Mat3 rtr = mat3_mul(mat3_transpose(rotation), rotation);
        const Mat3 id = mat3_identity();
        for (int i = 0; i < 9; ++i)
            if (std::abs(rtr[i] - id[i]) > tol) return false;
        const double det =
            rotation[0] * (rotation[4] * rotation[8] - rotation[5] * rotation[7]) -
            rotation[1] * (rotation[3] * rotation[8] - rotation[5] * rotation[6]) +
            rotation[2] * (rotation[3] * rotation[7] - rotation[4] * rotation[6]);
        return std::abs(det - 1.0) < tol;
    }
};

inline Pose compose(const Pose& a, const Pose& b) {
    Pose out;
    out.rotation = mat3_mul(a.rotation, b.rotation);
    out.translation = a.apply(b.translation);
    return out;
}

inline Pose invert(const Pose& p) {
    Pose out;
    out.rotation = mat3_transpose(p.rotation);
    const Vec3 t = mat3_mul_vec(out.rotation, p.translation);
    out.translation = {-t[0], -t[1], -t[2]};
    return out;
}

inline constexpr double kZNear = 1e-3;  // 1 mm in front of the image plane

struct PixelPoint {
    double u = 0, v = 0;
    double depth = 0;       // z in the camera frame
    bool in_front = false;  // depth > z_near
};

struct CameraModel {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Pose world_to_cam;  // extrinsics

    PixelPoint project(const Vec3& world_pt) const {
        const Vec3 c = world_to_cam.apply(world_pt);
        PixelPoint out;
        out.depth = c[2];
        if (c[2] <= kZNear) return out;
        out.in_front = true;
        out.u = fx * c[0] / c[2] + cx;
        out.v = fy * c[1] / c[2] + cy;
        return out;
    }

    // world point on the ray through pixel (u,v) at world plane z = plane_z;
    // cameras here always look along -z in world, so the ray-plane solve is
    // done in camera coordinates with a guard on parallel rays
    std::optional<Vec3> unproject_to_plane(double u, double v, double plane_z) const {
        const Pose cam_to_world = invert(world_to_cam);
        const Vec3 dir_cam = {(u - cx) / fx, (v - cy) / fy, 1.0};
        const Vec3 dir_world = mat3_mul_vec(cam_to_world.rotation, dir_cam);
        const Vec3& origin = cam_to_world.translation;
        if (std::abs(dir_world[2]) < 1e-12) return std::nullopt;
        const double t = (plane_z - origin[2]) / dir_world[2];
        if (t <= 0) return std::nullopt;
        return Vec3{origin[0] + t * dir_world[0], origin[1] + t * dir_world[1], plane_z};
    }
};

struct BBox2D {
    double min_u = 0, min_v = 0, max_u = 0, max_v = 0;
    bool valid = false;

    double area() const { return valid ? (max_u - min_u) * (max_v - min_v) : 0.0; }
    bool contains(double u, double v) const {
        return valid && u >= min_u && u <= max_u && v >= min_v && v <= max_v;
    }
};

// project the 8 corners of the sensor's oriented box and take the pixel AABB
// of the corners in front of the camera, clamped to the image; the box is
// invalid when no corner is in front or the AABB misses the image entirely
inline BBox2D sensor_bbox(const CameraModel& cam, const Pose& sensor, const Vec3& half_extents) {
    TD_CHECK(half_extents[0] > 0 && half_extents[1] > 0 && half_extents[2] > 0,
             "sensor_bbox: half extents must be positive");
    BBox2D box;
    bool first = true;
    for (int cz = -1; cz <= 1; cz += 2)
        for (int cyc = -1; cyc <= 1; cyc += 2)
            for (int cxc = -1; cxc <= 1; cxc += 2) {
                const Vec3 corner = {cxc * half_extents[0], cyc * half_extents[1],
                                     cz * half_extents[2]};
                const PixelPoint px = cam.project(sensor.apply(corner));
                if (!px.in_front) continue;
                if (first) {
                    box.min_u = box.max_u = px.u;
                    box.min_v = box.max_v = px.v;
                    first = false;
                } else {
                    box.min_u = std::min(box.min_u, px.u);
                    box.max_u = std::max(box.max_u, px.u);
                    box.min_v = std::min(box.min_v, px.v);
                    box.max_v = std::max(box.max_v, px.v);
                }
            }
    if (first) return box;  // everything behind the camera
    if (box.max_u <= 0 || box.min_u >= cam.width || box.max_v <= 0 || box.min_v >= cam.height)
        return box;  // projects fully outside the image
    box.min_u = std::max(box.min_u, 0.0);
    box.min_v = std::max(box.min_v, 0.0);
    box.max_u = std::min(box.max_u, double(cam.width));
    box.max_v = std::min(box.max_v, double(cam.height));
    box.valid = true;
    return box;
}

// true for every patch whose center lies inside the bbox (inclusive bounds)
inline std::vector<bool> bbox_token_mask(const BBox2D& bbox, size_t rows, size_t cols,
                                         double patch_px) {
    std::vector<bool> mask(rows * cols, false);
    if (!bbox.valid) return mask;
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) {
            const double u = (double(c) + 0.5) * patch_px;
            const double v = (double(r) + 0.5) * patch_px;
            if (bbox.contains(u, v)) mask[r * cols + c] = true;
        }
    return mask;
}

// ---------------------------------------------------------------------------
// calibration file: flat JSON with intrinsics, image size, and extrinsics
// ---------------------------------------------------------------------------

inline nlohmann::json camera_to_json(const CameraModel& cam) {
    nlohmann::json j;
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    j["width"] = cam.width;
    j["height"] = cam.height;
    j["rotation"] = cam.world_to_cam.rotation;
    j["translation"] = cam.world_to_cam.translation;
    return j;
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
    CameraModel cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.world_to_cam.rotation = j.at("rotation").get<Mat3>();
    cam.world_to_cam.translation = j.at("translation").get<Vec3>();
    TD_CHECK(cam.fx > 0 && cam.fy > 0, "calibration: focal lengths must be positive");
    TD_CHECK(cam.cx >= 0 && cam.cx < cam.width && cam.cy >= 0 && cam.cy < cam.height,
             "calibration: principal point outside image");
    return cam;
}

} // namespace tacdream::geometry
