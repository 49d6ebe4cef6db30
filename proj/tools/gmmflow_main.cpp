// Command-line pipeline: synthetic demonstrations -> EM-fitted mixture policy
// -> trust-region policy optimization -> evaluation reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "gmmflow/em.hpp"
#include "gmmflow/env.hpp"
#include "gmmflow/io.hpp"
#include "gmmflow/optimizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
    gmmflow::TaskSpec task;
    gmmflow::OptimizerConfig optimizer;
    int n_components = 0;
    int n_demos = 0;
    std::vector<long> seeds{0};
    long max_env_steps = 0;
    std::string output_dir = ".";
    double noise_scale = 0.15;
    double success_target = 0.9;
    int success_patience = 2;
    double branch_weight_target = 0.8;
};

long default_budget(gmmflow::TaskKind kind) {
    return kind == gmmflow::TaskKind::reaching ? 150000 : 200000;
}

RunConfig preset_run(const std::string& task_name) {
    RunConfig rc;
    rc.task = gmmflow::task_preset(task_name);
    rc.optimizer = gmmflow::default_optimizer_for(rc.task);
    rc.optimizer.plateau_window = 40;  // keep long adaptation runs alive
    if (rc.task.kind == gmmflow::TaskKind::multi_goal) {
        // Branch migration is carried by the weights: the demonstration field
        // already reaches both goals, so the Gaussians need almost no motion,
        // while the weight flow must move mass across the expensive
        // inter-branch transport gap.  Tighten the Gaussian trust region so
        // small mean tilts cannot quietly decide the fork (which would
        // saturate success and kill the migration signal), and give the
        // weight block a wide berth: weak proximal pull, a faster rate, and
        // large per-step and per-iteration transport budgets.
        // The proximal pull prices cross-branch mass at the full inter-branch
        // transport cost (~W2^2 of the component gap), so tau must exceed
        // gap-cost / gradient-scale or the weights stay pinned to the
        // reference no matter how strong the reward signal is.  The Gaussian
        // trust region is tightened hard: branch migration feeds on failed
        // rollouts, and if the means can tilt the fork early they saturate
        // success and starve the weight flow before the mass has moved.  The
        // entropy bonus is nearly dropped for the same reason - it pulls the
        // fork weights back toward an even split - but a trace of it is kept,
        // with a hard floor, so weight churn cannot starve a load-bearing
        // component into the gradient-dead zone of the softmax.
        const double base = rc.optimizer.c_max;
        rc.optimizer.c_max = 0.025 * base;
        rc.optimizer.tau = 2000.0;
        rc.optimizer.weight_lr = 0.3;
        rc.optimizer.inner_weight_iters = 28;
        rc.optimizer.weight_c_max = 25.0 * base;
        // Room for the full weight inner loop: the per-outer drift budget has
        // to cover inner_weight_iters steps of up to weight_c_max each, or
        // the radius check quietly throttles migration to a few steps.
        rc.optimizer.w2_trust_radius = 700.0 * base;
        rc.optimizer.beta = 1e-4;
        rc.optimizer.weight_floor = 0.01;
        rc.optimizer.plateau_window = 60;
        // With the entropy term off, the fixed-batch free-energy estimate
        // cannot see policy changes at all, so the inner settle test would
        // fire immediately every time: push its window past the iteration
        // caps and bound both blocks by explicit caps instead.
        rc.optimizer.inner_tol_window = 1000;
        rc.optimizer.inner_gauss_iters = 5;
    }
    rc.n_components = rc.task.default_n_components;
    rc.n_demos = rc.task.default_n_demos;
    rc.max_env_steps = default_budget(rc.task.kind);
    return rc;
}

gmmflow::Vector vec_from_json(const json& j) {
    gmmflow::Vector v(j.size());
    for (size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j.at(i).get<double>();
    return v;
}

void apply_task_overrides(gmmflow::TaskSpec& t, const json& j) {
    if (j.contains("horizon")) t.horizon = j.at("horizon").get<int>();
    if (j.contains("dt")) t.dt = j.at("dt").get<double>();
    if (j.contains("success_threshold")) t.success_threshold = j.at("success_threshold").get<double>();
    if (j.contains("tail_fraction")) t.tail_fraction = j.at("tail_fraction").get<double>();
    if (j.contains("workspace_bound")) t.workspace_bound = j.at("workspace_bound").get<double>();
    if (j.contains("divergence_penalty")) t.divergence_penalty = j.at("divergence_penalty").get<double>();
    if (j.contains("collision_penalty")) t.collision_penalty = j.at("collision_penalty").get<double>();
    if (j.contains("demo_dwell_fraction")) t.demo_dwell_fraction = j.at("demo_dwell_fraction").get<double>();
    if (j.contains("reward_kind")) {
        const auto s = j.at("reward_kind").get<std::string>();
        if (s == "dense") t.reward_kind = gmmflow::RewardKind::dense;
        else if (s == "sparse") t.reward_kind = gmmflow::RewardKind::sparse;
        else throw std::invalid_argument("config: reward_kind must be dense or sparse");
    }
    if (j.contains("start")) t.start = vec_from_json(j.at("start"));
    if (j.contains("targets")) {
        t.targets.clear();
        for (const auto& v : j.at("targets")) t.targets.push_back(vec_from_json(v));
    }
    if (j.contains("obstacles")) {
        t.obstacles.clear();
        for (const auto& o : j.at("obstacles")) {
            if (o.size() != 3) throw std::invalid_argument("config: obstacle entries are [cx, cy, r]");
            gmmflow::Obstacle ob;
            ob.center = gmmflow::Vector(2);
            ob.center << o.at(0).get<double>(), o.at(1).get<double>();
            ob.radius = o.at(2).get<double>();
            t.obstacles.push_back(std::move(ob));
        }
    }
}

void apply_optimizer_overrides(gmmflow::OptimizerConfig& c, const json& j) {
    auto d = [&](const char* k, double& field) { if (j.contains(k)) field = j.at(k).get<double>(); };
    auto i = [&](const char* k, int& field) { if (j.contains(k)) field = j.at(k).get<int>(); };
    d("tau", c.tau);
    d("lambda0", c.lambda0);
    d("alpha", c.alpha);
    d("lambda_min", c.lambda_min);
    d("c_max", c.c_max);
    d("w2_trust_radius", c.w2_trust_radius);
    d("beta", c.beta);
    d("gamma", c.gamma);
    d("weight_lr", c.weight_lr);
    d("sinkhorn_epsilon", c.sinkhorn_epsilon);
    d("sinkhorn_tol", c.sinkhorn_tol);
    d("inner_rel_tol", c.inner_rel_tol);
    d("plateau_rel_tol", c.plateau_rel_tol);
    d("ablation_fd_step", c.ablation_fd_step);
    i("episodes_per_iter", c.episodes_per_iter);
    i("inner_gauss_iters", c.inner_gauss_iters);
    i("inner_weight_iters", c.inner_weight_iters);
    i("sinkhorn_max_iters", c.sinkhorn_max_iters);
    i("inner_tol_window", c.inner_tol_window);
    i("plateau_window", c.plateau_window);
    if (j.contains("subtract_baseline")) c.subtract_baseline = j.at("subtract_baseline").get<bool>();
}

void apply_config_file(RunConfig& rc, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("invalid config json in " + path + ": " + e.what());
    }
    if (j.contains("task")) apply_task_overrides(rc.task, j.at("task"));
    if (j.contains("optimizer")) apply_optimizer_overrides(rc.optimizer, j.at("optimizer"));
    if (j.contains("run")) {
        const auto& r = j.at("run");
        if (r.contains("n_components")) rc.n_components = r.at("n_components").get<int>();
        if (r.contains("n_demos")) rc.n_demos = r.at("n_demos").get<int>();
        if (r.contains("max_env_steps")) rc.max_env_steps = r.at("max_env_steps").get<long>();
        if (r.contains("noise_scale")) rc.noise_scale = r.at("noise_scale").get<double>();
        if (r.contains("success_target")) rc.success_target = r.at("success_target").get<double>();
        if (r.contains("success_patience")) rc.success_patience = r.at("success_patience").get<int>();
        if (r.contains("branch_weight_target"))
            rc.branch_weight_target = r.at("branch_weight_target").get<double>();
        if (r.contains("seeds")) {
            rc.seeds.clear();
            for (const auto& s : r.at("seeds")) rc.seeds.push_back(s.get<long>());
            if (rc.seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
        }
    }
}

std::vector<long> parse_seed_list(const std::string& text) {
    std::vector<long> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        size_t pos = 0;
        const long v = std::stol(item, &pos);
        if (pos != item.size()) throw std::invalid_argument("bad seed list entry: " + item);
        seeds.push_back(v);
    }
    if (seeds.empty()) throw std::invalid_argument("empty seed list");
    return seeds;
}

std::string demo_path(const RunConfig& rc) {
    return (fs::path(rc.output_dir) / (to_string(rc.task.kind) + "_demos.jsonl")).string();
}

std::string policy_path(const RunConfig& rc) {
    return (fs::path(rc.output_dir) / (to_string(rc.task.kind) + "_policy.json")).string();
}

std::vector<gmmflow::Vector> demos_to_points(const std::vector<gmmflow::Trajectory>& demos) {
    std::vector<gmmflow::Vector> points;
    for (const auto& traj : demos)
        for (const auto& st : traj.steps) {
            gmmflow::Vector x(st.state.size() + st.action.size());
            x << st.state, st.action;
            points.push_back(std::move(x));
        }
    return points;
}

int cmd_demo_gen(const RunConfig& rc, long seed) {
    fs::create_directories(rc.output_dir);
    std::mt19937_64 rng(static_cast<uint64_t>(seed));
    const auto demos = gmmflow::demo_generate(rc.task, rc.n_demos, rng, rc.noise_scale);
    const auto path = demo_path(rc);
    gmmflow::write_trajectories(path, demos, to_string(rc.task.kind), seed);
    std::cout << "wrote " << demos.size() << " demos to " << path << "\n";
    return 0;
}

int cmd_fit(const RunConfig& rc, const std::string& demos_file, long seed) {
    fs::create_directories(rc.output_dir);
    const auto file = demos_file.empty() ? demo_path(rc) : demos_file;
    const auto demos = gmmflow::read_trajectories(file);
    const auto points = demos_to_points(demos.trajectories);
    std::mt19937_64 rng(static_cast<uint64_t>(seed));
    const gmmflow::Gmm policy = gmmflow::em_fit(points, rc.n_components, rng);
    const auto path = policy_path(rc);
    gmmflow::save_gmm(path, policy);
    std::cout << "fitted " << rc.n_components << "-component policy from " << points.size()
              << " points -> " << path << "\n";
    return 0;
}

// Convergence = success rate at target for `patience` consecutive outer
// iterations; branched tasks additionally require the adapted branch to carry
// the dominant mixture weight, since their adaptation is weight-driven and the
// rollout success rate alone saturates long before the weights settle.
gmmflow::SuccessCriterion make_success_criterion(const RunConfig& rc,
                                                 const gmmflow::BlockSplit& split) {
    const double target = rc.success_target;
    const int patience = rc.success_patience;
    const bool branched = rc.task.demo_targets.size() > 1;
    const double branch_target = rc.branch_weight_target;
    const gmmflow::TaskSpec task = rc.task;
    return [=, streak = 0](const gmmflow::MetricsRow& row, const gmmflow::Gmm& policy) mutable {
        bool ok = row.success_rate >= target;
        if (ok && branched)
            ok = gmmflow::desired_branch_weight(policy, split, task) >= branch_target;
        streak = ok ? streak + 1 : 0;
        return streak >= patience;
    };
}

int cmd_optimize(const RunConfig& rc, const std::string& policy_file, const std::string& mode) {
    fs::create_directories(rc.output_dir);
    const auto file = policy_file.empty() ? policy_path(rc) : policy_file;
    const gmmflow::Gmm initial = gmmflow::load_gmm(file);
    const gmmflow::BlockSplit split{rc.task.d, rc.task.d};
    split.check(initial.dim());

    gmmflow::OptimizerConfig cfg = rc.optimizer;
    if (mode == "riemannian") cfg.mode = gmmflow::OptimizerMode::riemannian;
    else if (mode == "ablation" || mode == "cholesky_ablation")
        cfg.mode = gmmflow::OptimizerMode::cholesky_ablation;
    else throw std::invalid_argument("unknown mode: " + mode);
    const std::string mode_tag = cfg.mode == gmmflow::OptimizerMode::riemannian ? "riemannian" : "ablation";

    json summary;
    summary["task"] = to_string(rc.task.kind);
    summary["mode"] = mode_tag;
    summary["success_target"] = rc.success_target;
    summary["max_env_steps"] = rc.max_env_steps;
    json per_seed = json::array();
    int completed = 0;

    for (const long seed : rc.seeds) {
        const std::string stem =
            to_string(rc.task.kind) + "_" + mode_tag + "_seed" + std::to_string(seed);
        json entry;
        entry["seed"] = seed;
        try {
            std::mt19937_64 rng(static_cast<uint64_t>(seed));
            const auto res = gmmflow::optimize(
                initial, rc.task, split, cfg, rng,
                make_success_criterion(rc, split), rc.max_env_steps);

            const auto metrics_file = (fs::path(rc.output_dir) / (stem + "_metrics.csv")).string();
            const auto policy_out = (fs::path(rc.output_dir) / (stem + "_policy.json")).string();
            gmmflow::write_metrics_csv(metrics_file, res.metrics);
            gmmflow::save_gmm(policy_out, res.policy);

            long first_success = -1, first_full = -1;
            json curve = json::array();
            for (const auto& row : res.metrics) {
                curve.push_back({row.env_steps, row.success_rate});
                if (first_success < 0 && row.success_rate >= rc.success_target)
                    first_success = row.env_steps;
                if (first_full < 0 && row.success_rate >= 1.0) first_full = row.env_steps;
            }
            entry["stop_reason"] = res.stop_reason;
            entry["env_steps"] = res.env_steps;
            entry["final_success_rate"] =
                res.metrics.empty() ? 0.0 : res.metrics.back().success_rate;
            entry["first_success_step"] = first_success;
            entry["first_full_success_step"] = first_full;
            entry["max_step_w2"] = res.max_step_w2;
            entry["numeric_aborts"] = res.numeric_aborts;
            entry["metrics_csv"] = metrics_file;
            entry["policy_json"] = policy_out;
            entry["success_curve"] = std::move(curve);
            ++completed;
            std::cout << stem << ": " << res.stop_reason << " after " << res.env_steps
                      << " env steps, final success "
                      << entry["final_success_rate"].get<double>() << "\n";
        } catch (const gmmflow::NumericError& e) {
            entry["error"] = e.what();
            std::cerr << stem << ": numeric failure: " << e.what() << "\n";
        }
        per_seed.push_back(std::move(entry));
    }
    summary["runs"] = std::move(per_seed);
    const auto summary_file =
        (fs::path(rc.output_dir) / (to_string(rc.task.kind) + "_" + mode_tag + "_summary.json"))
            .string();
    std::ofstream out(summary_file);
    if (!out) throw std::invalid_argument("cannot open for writing: " + summary_file);
    out << summary.dump(2) << "\n";
    std::cout << "summary -> " << summary_file << "\n";
    if (completed == 0) throw gmmflow::NumericError("all seeds failed numerically");
    return 0;
}

int cmd_evaluate(const RunConfig& rc, const std::string& policy_file, long seed, int rollouts,
                 bool use_original, const std::string& report_file) {
    const auto file = policy_file.empty() ? policy_path(rc) : policy_file;
    const gmmflow::Gmm policy = gmmflow::load_gmm(file);
    const gmmflow::TaskSpec task = use_original ? gmmflow::original_task(rc.task) : rc.task;
    const gmmflow::BlockSplit split{task.d, task.d};
    split.check(policy.dim());
    if (rollouts < 1) throw std::invalid_argument("evaluate: rollouts must be >= 1");

    std::mt19937_64 rng(static_cast<uint64_t>(seed));
    const auto batch = gmmflow::rollout(policy, split, task, rollouts, rng,
                                        rc.optimizer.gamma, 0.0);
    int collisions = 0, divergences = 0;
    double err_sum = 0.0, return_sum = 0.0;
    for (const auto& traj : batch.trajectories) {
        if (traj.done_reason == gmmflow::DoneReason::collision) ++collisions;
        if (traj.done_reason == gmmflow::DoneReason::divergence) ++divergences;
        const auto& last = traj.steps.back();
        err_sum += gmmflow::target_error(last.state + task.dt * last.action, task);
        for (const auto& st : traj.steps) return_sum += st.reward;
    }
    json report;
    report["task"] = to_string(task.kind);
    report["target_set"] = use_original ? "original" : "adapted";
    report["rollouts"] = rollouts;
    report["seed"] = seed;
    report["success_rate"] = gmmflow::success_rate(batch, task);
    report["collision_rate"] = static_cast<double>(collisions) / rollouts;
    report["divergence_rate"] = static_cast<double>(divergences) / rollouts;
    report["mean_final_error"] = err_sum / rollouts;
    report["mean_return"] = return_sum / rollouts;
    std::cout << report.dump(2) << "\n";
    if (!report_file.empty()) {
        fs::create_directories(fs::path(report_file).parent_path().empty()
                                   ? fs::path(".")
                                   : fs::path(report_file).parent_path());
        std::ofstream out(report_file);
        if (!out) throw std::invalid_argument("cannot open for writing: " + report_file);
        out << report.dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GMM policy adaptation toolkit: demos, EM fitting, "
                 "Wasserstein trust-region optimization, evaluation"};
    app.require_subcommand(1);

    std::string task_name = "reaching", config_file, out_dir = ".";
    long seed = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--task", task_name, "task preset: reaching | collision | multigoal");
        sub->add_option("--config", config_file, "JSON config overriding preset values");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "random seed");
    };

    auto* demo_gen = app.add_subcommand("demo-gen", "generate synthetic demonstrations");
    int n_demos_flag = 0;
    double noise_flag = -1.0;
    add_common(demo_gen);
    demo_gen->add_option("--n-demos", n_demos_flag, "number of demonstrations");
    demo_gen->add_option("--noise-scale", noise_flag, "positional noise scale");

    auto* fit = app.add_subcommand("fit", "fit a mixture policy to demonstrations");
    std::string demos_file;
    int n_components_flag = 0;
    add_common(fit);
    fit->add_option("--demos", demos_file, "demonstrations JSONL file");
    fit->add_option("--n-components", n_components_flag, "mixture size");

    auto* optimize = app.add_subcommand("optimize", "adapt a policy on a task");
    std::string policy_file, mode = "riemannian", seeds_text;
    long max_env_steps_flag = 0;
    add_common(optimize);
    optimize->add_option("--policy", policy_file, "initial policy JSON");
    optimize->add_option("--mode", mode, "riemannian | ablation");
    optimize->add_option("--seeds", seeds_text, "comma-separated seed list");
    optimize->add_option("--max-env-steps", max_env_steps_flag, "environment step budget per seed");

    auto* evaluate = app.add_subcommand("evaluate", "roll out a policy and report success");
    int rollouts = 100;
    bool eval_original = false;
    std::string report_file;
    add_common(evaluate);
    evaluate->add_option("--policy", policy_file, "policy JSON to evaluate");
    evaluate->add_option("--rollouts", rollouts, "number of evaluation rollouts");
    evaluate->add_flag("--original", eval_original, "evaluate on the pre-adaptation task");
    evaluate->add_option("--report", report_file, "also write the JSON report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig rc = preset_run(task_name);
        rc.output_dir = out_dir;
        if (!config_file.empty()) apply_config_file(rc, config_file);
        if (n_demos_flag > 0) rc.n_demos = n_demos_flag;
        if (noise_flag >= 0.0) rc.noise_scale = noise_flag;
        if (n_components_flag > 0) rc.n_components = n_components_flag;
        if (max_env_steps_flag > 0) rc.max_env_steps = max_env_steps_flag;
        if (!seeds_text.empty()) rc.seeds = parse_seed_list(seeds_text);
        else if (optimize->parsed() && seed != 0) rc.seeds = {seed};
        rc.task.validate();
        rc.optimizer.validate();

        if (demo_gen->parsed()) return cmd_demo_gen(rc, seed);
        if (fit->parsed()) return cmd_fit(rc, demos_file, seed);
        if (optimize->parsed()) return cmd_optimize(rc, policy_file, mode);
        if (evaluate->parsed()) return cmd_evaluate(rc, policy_file, seed, rollouts,
                                                    eval_original, report_file);
        throw std::invalid_argument("no subcommand given");
    } catch (const std::invalid_argument& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const std::ios_base::failure& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const gmmflow::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
}
