#pragma once

// Deterministic 2.5-D contact simulator with two tasks (peg-in-hole,
// tool-stabilize), flat-shaded multi-view rendering through the same pinhole
// cameras used for bbox projection, an analytic gel tactile renderer, and a
// privileged scripted expert.
//
// The contact model is intentionally minimal but keeps the properties the
// tasks need: normal force linear in penetration, grasp-offset slip when the
// tangential load beats friction, and a tactile blob that encodes both the
// in-hand offset and the local hole geometry (the blob loses support over the
// hole mouth, so its centroid points away from the hole).

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/geometry.hpp"

namespace tacdream::simworld {

enum class Task { peg_in_hole = 0, tool_stabilize = 1 };

inline const char* task_name(Task t) {
    return t == Task::peg_in_hole ? "peg_in_hole" : "tool_stabilize";
}

inline Task task_from_name(const std::string& s) {
    if (s == "peg_in_hole") return Task::peg_in_hole;
    if (s == "tool_stabilize") return Task::tool_stabilize;
    TD_CHECK(false, "unknown task: " + s);
    return Task::peg_in_hole;
}

struct SimParams {
    // workspace geometry (meters)
    double table_z = -0.004;
    double plate_half = 0.06;
    double hole_range = 0.03;        // hole center sampled uniformly in +-3 cm
    double hole_yaw_deg = 15.0;
    double peg_radius = 0.005;
    double hole_radius = 0.0055;     // 0.5 mm radial clearance
    double hole_depth = 0.010;
    double grasp_offset_range = 0.002;
    double max_grasp_offset = 0.003;
    double tip_drop_peg = 0.030;     // peg tip below the gripper origin
    double tip_drop_tool = 0.005;
    double gripper_start_z = 0.060;
    double gripper_half = 0.010;     // drawn footprint

    // contact model
    double stiffness = 500.0;            // N/m, fz = k * penetration
    double friction_mu = 0.6;
    double tangential_stiffness = 1000.0;  // N/m of per-step lateral motion
    double slip_ratio = 0.8;

    // action limits (per step)
    double max_step_xy = 0.005;
    double max_step_rot = 0.05;

    // task termination
    double insert_depth = 0.002;
    int max_steps = 120;

    // tool task
    double tool_tilt_init_lo = 0.0436;   // 2.5 deg
    double tool_tilt_init_hi = 0.0698;   // 4 deg
    double tool_tilt_cap = 0.30;
    double impulse_mag = 0.00873;        // 0.5 deg
    int impulse_period = 15;
    double corr_gain = 8.7;              // rad of tilt removed per meter of motion
    double shift_per_rad = 0.0573;       // contact-point shift, ~1 mm per degree
    double support_xy = 0.008;
    double support_z_lo = 0.008;
    double support_z_hi = 0.020;
    double support_aperture = 0.4;
    double stable_tol = 0.0349;          // 2 deg
    int stable_steps = 20;
    double tool_fz = 1.0;
    double tool_half_cross = 0.004;      // held cube cross-section half side
    double tool_base_xy_range = 0.03;
    double tool_height = 0.12;
    double tool_top_radius = 0.006;

    // cameras / images
    int img_size = 64;
    int tac_size = 32;
    double gel_half = 0.008;
    double tpv_cam_height = 1.2;
    double tpv_focal = 426.0;
    double wrist_standoff = 0.30;
    double wrist_focal = 256.0;
    double occluder_half = 0.045;
    double occluder_z = 0.050;

    // tactile shading
    double shade_gain = 0.8;
    double gel_max_depth = 0.004;

    std::array<double, 3> sensor_half_extents = {0.008, 0.008, 0.004};
};

struct Action {
    std::array<double, 7> v = {0, 0, 0, 0, 0, 0, 0};  // dx dy dz droll dpitch dyaw grip
    double& operator[](size_t i) { return v[i]; }
    double operator[](size_t i) const { return v[i]; }
};

struct WorldState {
    Task task = Task::peg_in_hole;
    uint64_t seed = 0;
    int step_index = 0;

    // gripper
    std::array<double, 3> grip_pos = {0, 0, 0};
    std::array<double, 3> grip_rpy = {0, 0, 0};
    double aperture = 1.0;

    // held object slip within the gripper (gripper frame, meters)
    std::array<double, 2> grasp_offset = {0, 0};

    // hole pose (peg task) or tool base (tool task)
    std::array<double, 2> target_xy = {0, 0};
    double target_yaw = 0;

    // contact
    std::array<double, 3> wrench = {0, 0, 0};  // fx fy fz
    bool inserted = false;

    // tool task
    std::array<double, 2> tool_tilt = {0, 0};
    int stable_count = 0;

    bool done = false;
    bool success = false;
};

struct Observation {
    std::vector<float> tpv;      // img*img*3
    std::vector<float> wrist;    // img*img*3
    std::vector<float> tactile;  // tac*tac*3
    std::array<float, 7> proprio = {};
    int prompt_id = 0;
    geometry::CameraModel tpv_cam, wrist_cam;
    geometry::Pose sensor_pose;
};

struct StepResult {
    WorldState state;
    bool done = false;
    bool success = false;
};

class Env {
public:
    explicit Env(Task task, SimParams params = {}) : task_(task), p_(params) {}

    Task task() const { return task_; }
    const SimParams& params() const { return p_; }

    WorldState reset(uint64_t seed) const {
        Rng rng = Rng(seed).split(uint64_t(task_) + 0x7A5Cu);
        WorldState s;
        s.task = task_;
        s.seed = seed;
        s.grip_pos = {0, 0, p_.gripper_start_z};
        s.grip_rpy = {0, 0, 0};
        s.target_xy = {rng.uniform(-p_.hole_range, p_.hole_range),
                       rng.uniform(-p_.hole_range, p_.hole_range)};
        const double yaw_range = p_.hole_yaw_deg * M_PI / 180.0;
        s.target_yaw = rng.uniform(-yaw_range, yaw_range);
        s.grasp_offset = {rng.uniform(-p_.grasp_offset_range, p_.grasp_offset_range),
                          rng.uniform(-p_.grasp_offset_range, p_.grasp_offset_range)};
        if (task_ == Task::peg_in_hole) {
            s.aperture = 0.3;
        } else {
            s.aperture = 0.8;
            const double mag = rng.uniform(p_.tool_tilt_init_lo, p_.tool_tilt_init_hi);
            const double ang = rng.uniform(0, 2 * M_PI);
            s.tool_tilt = {mag * std::cos(ang), mag * std::sin(ang)};
            s.grasp_offset = {0, 0};  // nothing in contact yet
        }
        return s;
    }

    // peg tip (or cube contact point) position in world, including in-hand slip
    std::array<double, 3> tip_position(const WorldState& s) const {
        const double yaw = s.grip_rpy[2];
        const double cy = std::cos(yaw), sy = std::sin(yaw);
        const double ox = cy * s.grasp_offset[0] - sy * s.grasp_offset[1];
        const double oy = sy * s.grasp_offset[0] + cy * s.grasp_offset[1];
        const double drop = task_ == Task::peg_in_hole ? p_.tip_drop_peg : p_.tip_drop_tool;
        return {s.grip_pos[0] + ox, s.grip_pos[1] + oy, s.grip_pos[2] - drop};
    }

    StepResult step(const WorldState& state, const Action& action) const {
        for (double a : action.v) TD_CHECK(std::isfinite(a), "step: non-finite action");
        TD_CHECK(!state.done, "step: episode already done");

        WorldState s = state;
        const double dx = std::clamp(action[0], -p_.max_step_xy, p_.max_step_xy);
        const double dy = std::clamp(action[1], -p_.max_step_xy, p_.max_step_xy);
        const double dz = std::clamp(action[2], -p_.max_step_xy, p_.max_step_xy);
        for (int i = 0; i < 3; ++i) {
            const double dr = std::clamp(action[3 + i], -p_.max_step_rot, p_.max_step_rot);
            s.grip_rpy[i] = std::clamp(s.grip_rpy[i] + dr, -0.2, 0.2);
        }
        s.grip_pos[0] = std::clamp(s.grip_pos[0] + dx, -0.05, 0.05);
        s.grip_pos[1] = std::clamp(s.grip_pos[1] + dy, -0.05, 0.05);
        s.grip_pos[2] = std::clamp(s.grip_pos[2] + dz, -0.02, 0.10);
        s.aperture = std::clamp(action[6], 0.0, 1.0);
        s.wrench = {0, 0, 0};

        if (task_ == Task::peg_in_hole) {
            step_peg(s, dx, dy);
        } else {
            step_tool(s, dx, dy);
        }

        s.step_index += 1;
        if (!s.success && s.step_index >= p_.max_steps) s.done = true;
        return {s, s.done, s.success};
    }

    Observation render(const WorldState& s) const {
        Observation obs;
        obs.prompt_id = int(s.task);
        obs.tpv_cam = tpv_camera();
        obs.wrist_cam = wrist_camera(s);
        obs.sensor_pose = sensor_pose(s);
        obs.tpv = render_view(s, obs.tpv_cam, true);
        obs.wrist = render_view(s, obs.wrist_cam, false);
        obs.tactile = render_tactile(s);
        obs.proprio = {float(s.grip_pos[0]), float(s.grip_pos[1]), float(s.grip_pos[2]),
                       float(s.grip_rpy[0]), float(s.grip_rpy[1]), float(s.grip_rpy[2]),
                       float(s.aperture)};
        return obs;
    }

    geometry::CameraModel tpv_camera() const {
        geometry::CameraModel cam;
        cam.fx = cam.fy = p_.tpv_focal;
        cam.cx = cam.cy = p_.img_size / 2.0;
        cam.width = cam.height = p_.img_size;
        cam.world_to_cam.rotation = {1, 0, 0, 0, -1, 0, 0, 0, -1};
        cam.world_to_cam.translation = {0, 0, p_.tpv_cam_height};
        return cam;
    }

    geometry::CameraModel wrist_camera(const WorldState& s) const {
        geometry::CameraModel cam;
        cam.fx = cam.fy = p_.wrist_focal;
        cam.cx = cam.cy = p_.img_size / 2.0;
        cam.width = cam.height = p_.img_size;
        cam.world_to_cam.rotation = {1, 0, 0, 0, -1, 0, 0, 0, -1};
        const double cz = s.grip_pos[2] + p_.wrist_standoff;
        // translation = -R * camera_center
        cam.world_to_cam.translation = {-s.grip_pos[0], s.grip_pos[1], cz};
        return cam;
    }

    geometry::Pose sensor_pose(const WorldState& s) const {
        const auto tip = tip_position(s);
        geometry::Pose pose =
            geometry::Pose::from_rpy(s.grip_rpy[0], s.grip_rpy[1], s.grip_rpy[2], {0, 0, 0});
        pose.translation = {s.grip_pos[0], s.grip_pos[1], tip[2]};
        return pose;
    }

    // three-light Lambertian shading of the gel height-map gradient
    std::vector<float> render_tactile(const WorldState& s) const {
        const int n = p_.tac_size;
        std::vector<double> h(size_t(n) * n, 0.0);
        const auto tip = tip_position(s);
        const double cell = 2.0 * p_.gel_half / n;

        double depth = 0.0;
        bool square_profile = false;
        if (s.task == Task::peg_in_hole) {
            depth = std::min(s.wrench[2] / p_.stiffness, p_.gel_max_depth);
        } else {
            depth = s.wrench[2] > 0 ? std::min(s.wrench[2] / p_.stiffness, p_.gel_max_depth) : 0.0;
            square_profile = true;
        }

        if (depth > 0) {
            const double yaw = s.grip_rpy[2];
            const double cy = std::cos(yaw), sy = std::sin(yaw);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    const double gu = (j + 0.5) * cell - p_.gel_half;
                    const double gv = (i + 0.5) * cell - p_.gel_half;
                    const double du = gu - s.grasp_offset[0];
                    const double dv = gv - s.grasp_offset[1];
                    double profile = 0.0;
                    if (square_profile) {
                        const double d = std::max(std::abs(du), std::abs(dv));
                        profile = std::max(0.0, 1.0 - d / p_.tool_half_cross);
                    } else {
                        const double r2 = du * du + dv * dv;
                        const double rr = p_.peg_radius * p_.peg_radius;
                        profile = std::max(0.0, 1.0 - r2 / rr);
                    }
                    if (profile <= 0.0) continue;
                    if (s.task == Task::peg_in_hole && !s.inserted) {
                        // cells of the peg face that overhang the hole mouth
                        // carry no contact pressure
                        const double wx = s.grip_pos[0] + cy * gu - sy * gv;
                        const double wy = s.grip_pos[1] + sy * gu + cy * gv;
                        const double hx = wx - s.target_xy[0];
                        const double hy = wy - s.target_xy[1];
                        if (hx * hx + hy * hy < p_.hole_radius * p_.hole_radius) continue;
                    }
                    h[size_t(i) * n + j] = depth * profile;
                }
            }
        }

        std::vector<float> img(size_t(n) * n * 3, 0.5f);
        const double inv2cell = 1.0 / (2.0 * cell);
        const double l_sq = 1.0 / std::sqrt(2.0);
        const std::array<std::array<double, 3>, 3> lights = {{
            {l_sq * 1.0, l_sq * 0.0, l_sq},
            {l_sq * -0.5, l_sq * 0.8660254037844386, l_sq},
            {l_sq * -0.5, l_sq * -0.8660254037844386, l_sq},
        }};
        auto at = [&](int i, int j) {
            i = std::clamp(i, 0, n - 1);
            j = std::clamp(j, 0, n - 1);
            return h[size_t(i) * n + j];
        };
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                const double gx = (at(i, j + 1) - at(i, j - 1)) * inv2cell;
                const double gy = (at(i + 1, j) - at(i - 1, j)) * inv2cell;
                const double inv_len = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
                const double nx = -gx * inv_len, ny = -gy * inv_len, nz = inv_len;
                for (int c = 0; c < 3; ++c) {
                    const double ndl = nx * lights[c][0] + ny * lights[c][1] + nz * lights[c][2];
                    const double val = 0.5 + p_.shade_gain * (ndl - l_sq);
                    img[(size_t(i) * n + j) * 3 + c] = float(std::clamp(val, 0.0, 1.0));
                }
            }
        }
        return img;
    }

    // privileged expert; a pure function of the state (per-episode noise is
    // re-derived from the episode seed)
    Action scripted_expert(const WorldState& s) const {
        return s.task == Task::peg_in_hole ? expert_peg(s) : expert_tool(s);
    }

private:
    void step_peg(WorldState& s, double dx, double dy) const {
        const auto tip = tip_position(s);
        const double ex = tip[0] - s.target_xy[0];
        const double ey = tip[1] - s.target_xy[1];
        const double lat = std::sqrt(ex * ex + ey * ey);
        const double clearance = p_.hole_radius - p_.peg_radius;

        if (tip[2] >= 0.0) {
            s.inserted = false;
            return;  // free space
        }
        if (s.inserted || lat <= clearance) {
            // inside the hole mouth: walls keep the tip within the clearance
            s.inserted = true;
            if (lat > clearance && lat > 0) {
                const double pull = (lat - clearance) / lat;
                s.grip_pos[0] -= ex * pull;
                s.grip_pos[1] -= ey * pull;
                s.wrench[0] = -ex * pull * p_.tangential_stiffness;
                s.wrench[1] = -ey * pull * p_.tangential_stiffness;
            }
            const double below_bottom = -(tip[2] + p_.hole_depth);
            if (below_bottom > 0) s.wrench[2] = p_.stiffness * below_bottom;
            if (tip[2] <= -p_.insert_depth) {
                s.success = true;
                s.done = true;
            }
            return;
        }
        // pressed on the plate: normal force plus friction-limited slip
        const double pen = -tip[2];
        const double fz = p_.stiffness * pen;
        const double step_lat = std::sqrt(dx * dx + dy * dy);
        const double f_lat = p_.tangential_stiffness * step_lat;
        s.wrench = {step_lat > 0 ? f_lat * dx / step_lat : 0.0,
                    step_lat > 0 ? f_lat * dy / step_lat : 0.0, fz};
        const double excess = f_lat - p_.friction_mu * fz;
        if (excess > 0 && step_lat > 0) {
            const double slip = p_.slip_ratio * excess / p_.tangential_stiffness;
            const double yaw = s.grip_rpy[2];
            const double cy = std::cos(yaw), sy = std::sin(yaw);
            // world-frame slip direction opposes the motion; store in gripper frame
            const double sx_w = -slip * dx / step_lat;
            const double sy_w = -slip * dy / step_lat;
            s.grasp_offset[0] += cy * sx_w + sy * sy_w;
            s.grasp_offset[1] += -sy * sx_w + cy * sy_w;
            for (auto& o : s.grasp_offset)
                o = std::clamp(o, -p_.max_grasp_offset, p_.max_grasp_offset);
        }
    }

    void step_tool(WorldState& s, double dx, double dy) const {
        // impulse schedule is a pure function of (seed, step)
        if ((s.step_index + 1) % p_.impulse_period == 0) {
            Rng imp = Rng(s.seed).split(0x1A9Du).split(uint64_t(s.step_index));
            const double ang = imp.uniform(0, 2 * M_PI);
            s.tool_tilt[0] += p_.impulse_mag * std::cos(ang);
            s.tool_tilt[1] += p_.impulse_mag * std::sin(ang);
        }
        const bool engaged = tool_engaged(s);
        if (engaged) {
            s.tool_tilt[0] -= p_.corr_gain * dx;
            s.tool_tilt[1] -= p_.corr_gain * dy;
            s.wrench = {p_.tool_fz * s.tool_tilt[0], p_.tool_fz * s.tool_tilt[1], p_.tool_fz};
            s.grasp_offset = {p_.shift_per_rad * s.tool_tilt[0], p_.shift_per_rad * s.tool_tilt[1]};
        } else {
            s.wrench = {0, 0, 0};
            s.grasp_offset = {0, 0};
        }
        const double mag = std::hypot(s.tool_tilt[0], s.tool_tilt[1]);
        if (mag > p_.tool_tilt_cap) {
            s.tool_tilt[0] *= p_.tool_tilt_cap / mag;
            s.tool_tilt[1] *= p_.tool_tilt_cap / mag;
        }
        if (mag <= p_.stable_tol && engaged) {
            s.stable_count += 1;
            if (s.stable_count >= p_.stable_steps) {
                s.success = true;
                s.done = true;
            }
        } else {
            s.stable_count = 0;
        }
    }

    bool tool_engaged(const WorldState& s) const {
        const double ex = s.grip_pos[0] - s.target_xy[0];
        const double ey = s.grip_pos[1] - s.target_xy[1];
        return std::hypot(ex, ey) <= p_.support_xy && s.grip_pos[2] >= p_.support_z_lo &&
               s.grip_pos[2] <= p_.support_z_hi && s.aperture <= p_.support_aperture;
    }

    Action expert_peg(const WorldState& s) const {
        Action a;
        a[6] = 0.3;
        const auto tip = tip_position(s);
        const double ex = s.target_xy[0] - tip[0];
        const double ey = s.target_xy[1] - tip[1];
        const double lat = std::hypot(ex, ey);

        if (s.inserted) {
            if (tip[2] > -p_.insert_depth - 0.0005) a[2] = -0.002;
            return a;
        }
        const bool in_contact = s.wrench[2] > 1e-9;
        if (!in_contact && tip[2] > 0.0005) {
            // approach above a noisy estimate of the hole; one episode in five
            // uses a wider noise scale so pressed-search data covers the
            // radii a trained policy actually visits
            Rng ep_noise = Rng(s.seed).split(0xA44Eu);
            const bool wide = ep_noise.uniform() < 0.2;
            const double sigma = wide ? 0.0025 : 0.001;
            const double bound = wide ? 0.0045 : 0.0025;
            const double nx = std::clamp(ep_noise.normal() * sigma, -bound, bound);
            const double ny = std::clamp(ep_noise.normal() * sigma, -bound, bound);
            const double tx = s.target_xy[0] + nx - tip[0];
            const double ty = s.target_xy[1] + ny - tip[1];
            const double d = std::hypot(tx, ty);
            if (d > 0.001) {
                const double step = std::min(d, 0.004);
                a[0] = tx / d * step;
                a[1] = ty / d * step;
            } else {
                a[2] = -std::min(0.004, tip[2] + 0.001);
            }
            return a;
        }
        // pressed search: walk the tip toward the true hole center under
        // bounded noise, keeping about 1 mm of penetration
        Rng step_noise = Rng(s.seed).split(0xB3E2u).split(uint64_t(s.step_index));
        const double target_pen_z = -0.001;
        a[2] = std::clamp(target_pen_z - tip[2], -0.002, 0.002);
        if (lat > 0.0003) {
            const double step = std::min(lat, 0.0008);
            const double nx = std::clamp(step_noise.normal() * 0.0001, -0.0002, 0.0002);
            const double ny = std::clamp(step_noise.normal() * 0.0001, -0.0002, 0.0002);
            a[0] = ex / lat * step + nx;
            a[1] = ey / lat * step + ny;
        } else {
            a[0] = ex;
            a[1] = ey;
            a[2] = -0.0015;
        }
        return a;
    }

    Action expert_tool(const WorldState& s) const {
        Action a;
        const double ex = s.target_xy[0] - s.grip_pos[0];
        const double ey = s.target_xy[1] - s.grip_pos[1];
        const double d = std::hypot(ex, ey);
        const double target_z = 0.012;
        if (!tool_engaged(s)) {
            a[6] = d < 0.004 ? 0.2 : 0.8;
            if (d > 0.002) {
                const double step = std::min(d, 0.004);
                a[0] = ex / d * step;
                a[1] = ey / d * step;
            }
            a[2] = std::clamp(target_z - s.grip_pos[2], -0.004, 0.004);
            return a;
        }
        a[6] = 0.2;
        Rng step_noise = Rng(s.seed).split(0xC77Au).split(uint64_t(s.step_index));
        a[0] = std::clamp(s.tool_tilt[0] / p_.corr_gain * 0.95 +
                              step_noise.normal() * 0.00005,
                          -0.004, 0.004);
        a[1] = std::clamp(s.tool_tilt[1] / p_.corr_gain * 0.95 +
                              step_noise.normal() * 0.00005,
                          -0.004, 0.004);
        a[2] = std::clamp(target_z - s.grip_pos[2], -0.002, 0.002);
        return a;
    }

    // flat-shaded top-down raster through the pinhole camera: per pixel, the
    // highest primitive plane hit wins
    std::vector<float> render_view(const WorldState& s, const geometry::CameraModel& cam,
                                   bool is_tpv) const {
        const int n = p_.img_size;
        std::vector<float> img(size_t(n) * n * 3);
        const std::array<float, 3> background = {0.12f, 0.12f, 0.14f};
        const std::array<float, 3> table_col = {0.74f, 0.72f, 0.69f};
        const std::array<float, 3> plate_col = {0.55f, 0.57f, 0.60f};
        const std::array<float, 3> hole_col = {0.08f, 0.08f, 0.10f};
        const std::array<float, 3> occluder_col = {0.95f, 0.62f, 0.10f};
        const std::array<float, 3> gripper_col = {0.15f, 0.35f, 0.85f};
        const std::array<float, 3> jaw_col = {0.06f, 0.15f, 0.40f};
        const std::array<float, 3> tool_base_col = {0.10f, 0.40f, 0.18f};
        const std::array<float, 3> tool_top_col = {0.25f, 0.80f, 0.35f};

        const double cyaw = std::cos(s.target_yaw), syaw = std::sin(s.target_yaw);
        const double gyaw = s.grip_rpy[2];
        const double cg = std::cos(gyaw), sg = std::sin(gyaw);

        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < n; ++c) {
                const double u = c + 0.5, v = r + 0.5;
                std::array<float, 3> color = background;
                double best_z = -1e9;
                auto consider = [&](double plane_z, auto&& inside, const std::array<float, 3>& col) {
                    if (plane_z <= best_z) return;
                    auto w = cam.unproject_to_plane(u, v, plane_z);
                    if (!w) return;
                    if (!inside((*w)[0], (*w)[1])) return;
                    best_z = plane_z;
                    color = col;
                };

                consider(p_.table_z,
                         [](double x, double y) { return std::abs(x) < 0.5 && std::abs(y) < 0.5; },
                         table_col);
                if (s.task == Task::peg_in_hole) {
                    consider(0.0,
                             [&](double x, double y) {
                                 const double lx = cyaw * x + syaw * y;
                                 const double ly = -syaw * x + cyaw * y;
                                 return std::abs(lx) <= p_.plate_half && std::abs(ly) <= p_.plate_half;
                             },
                             plate_col);
                    consider(1e-4,
                             [&](double x, double y) {
                                 const double hx = x - s.target_xy[0];
                                 const double hy = y - s.target_xy[1];
                                 return hx * hx + hy * hy <= p_.hole_radius * p_.hole_radius;
                             },
                             hole_col);
                } else {
                    consider(1e-4,
                             [&](double x, double y) {
                                 const double hx = x - s.target_xy[0];
                                 const double hy = y - s.target_xy[1];
                                 return hx * hx + hy * hy <= 0.008 * 0.008;
                             },
                             tool_base_col);
                    const double shift = p_.tool_height;
                    const double tx = s.target_xy[0] + shift * s.tool_tilt[0];
                    const double ty = s.target_xy[1] + shift * s.tool_tilt[1];
                    consider(p_.tool_height,
                             [&](double x, double y) {
                                 const double hx = x - tx;
                                 const double hy = y - ty;
                                 return hx * hx + hy * hy <= p_.tool_top_radius * p_.tool_top_radius;
                             },
                             tool_top_col);
                }
                consider(s.grip_pos[2],
                         [&](double x, double y) {
                             const double rx = x - s.grip_pos[0];
                             const double ry = y - s.grip_pos[1];
                             const double lx = cg * rx + sg * ry;
                             const double ly = -sg * rx + cg * ry;
                             return std::abs(lx) <= p_.gripper_half && std::abs(ly) <= p_.gripper_half;
                         },
                         gripper_col);
                const double jaw_half = 0.002 + 0.004 * s.aperture;
                consider(s.grip_pos[2] + 1e-4,
                         [&](double x, double y) {
                             const double rx = x - s.grip_pos[0];
                             const double ry = y - s.grip_pos[1];
                             const double lx = cg * rx + sg * ry;
                             const double ly = -sg * rx + cg * ry;
                             return std::abs(lx) <= jaw_half && std::abs(ly) <= jaw_half;
                         },
                         jaw_col);
                if (is_tpv && s.task == Task::peg_in_hole) {
                    consider(p_.occluder_z,
                             [&](double x, double y) {
                                 return std::abs(x) <= p_.occluder_half &&
                                        std::abs(y) <= p_.occluder_half;
                             },
                             occluder_col);
                }

                float* px = img.data() + (size_t(r) * n + c) * 3;
                px[0] = color[0];
                px[1] = color[1];
                px[2] = color[2];
            }
        }
        return img;
    }

    Task task_;
    SimParams p_;
};

} // namespace tacdream::simworld
