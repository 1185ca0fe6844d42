use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hcmt::dataset::Dataset;
use hcmt::model::{
    constant_velocity_rollout, evaluate, rollout, Model, ModelConfig, RolloutMetrics,
    TrainOptions,
};
use hcmt::plot::{read_rollout_file, render_rollout, Frame, RolloutFile};
use hcmt::{datagen, Error};

#[derive(Parser)]
#[command(
    name = "hcmt",
    version,
    about = "Learned flexible-body collision dynamics: data generation, training, rollout, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 2D ball-drop impact dataset
    Gendata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        val: usize,
        #[arg(long, default_value_t = 5)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene preset (currently: impact2d)
        #[arg(long, default_value = "impact2d")]
        preset: String,
        /// Recorded transitions per trajectory (κ)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a model on a dataset's train split
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat key = value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop rollout of one trajectory, written as a self-contained JSON file
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Trajectory index into the dataset
        #[arg(long, default_value_t = 0)]
        traj: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rollout metrics on the test split, against the constant-velocity baseline
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the tab-separated report here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-level pooled-mesh statistics for one trajectory
    MeshReport {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        lambda: usize,
        #[arg(long, default_value_t = 0)]
        traj: usize,
    },
    /// Finite-difference verification of the end-to-end loss gradient
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render per-step stress-field SVGs from a rollout file
    Plot {
        #[arg(long)]
        rollout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> hcmt::Result<()> {
    match command {
        Command::Gendata { out, train, val, test, seed, preset, steps } => {
            let mut spec = match preset.as_str() {
                "impact2d" => datagen::ScenarioSpec::impact2d(),
                other => return Err(Error::Config(format!("unknown preset '{other}'"))),
            };
            if let Some(steps) = steps {
                spec.steps = steps;
            }
            let ranges = datagen::MaterialRanges::default();
            let meta = datagen::generate_dataset(&spec, &ranges, train, val, test, seed, &out)?;
            println!(
                "wrote {} trajectories ({} nodes, {} cells, κ={}, dt={}s, γ={}) to {}",
                meta.trajectories.len(),
                meta.num_nodes,
                meta.cells.len(),
                spec.steps,
                meta.dt,
                meta.gamma,
                out.display()
            );
            Ok(())
        }
        Command::Train { data, config, out } => {
            let config = match config {
                Some(path) => ModelConfig::from_file(&path)?,
                None => ModelConfig::default(),
            };
            let dataset = Dataset::open(&data)?;
            let started = std::time::Instant::now();
            let (_, report) =
                hcmt::model::train(&config, &dataset, &out, &TrainOptions::default(), |line| {
                    println!("{line}")
                })?;
            println!(
                "trained {} steps in {:.1}s; checkpoint at {}",
                report.steps,
                started.elapsed().as_secs_f64(),
                out.display()
            );
            Ok(())
        }
        Command::Rollout { ckpt, data, traj, out } => {
            let model = Model::load(&ckpt)?;
            let dataset = Dataset::open(&data)?;
            let trajectory = dataset.load(traj)?;
            let radius = model.config.radius.unwrap_or_else(|| dataset.contact_radius());
            let result = rollout(&model, &trajectory, radius, 0)?;
            let to_frames = |states: &[hcmt::mesh::SystemState]| -> Vec<Frame> {
                states
                    .iter()
                    .map(|s| Frame { positions: s.world_coords.clone(), stress: s.stress.clone() })
                    .collect()
            };
            let file = RolloutFile {
                dt: trajectory.dt,
                cells: dataset.meta.cells.clone(),
                kinds: dataset.meta.kinds.clone(),
                diverged: result.diverged,
                predicted: to_frames(&result.states),
                ground_truth: to_frames(&trajectory.states),
            };
            hcmt::plot::write_rollout_file(&out, &file)?;
            let metrics =
                evaluate(&result.states, &trajectory.states, &trajectory.topology.kinds, 0)?;
            println!(
                "rollout of trajectory {traj}: {} steps{}  position RMSE-all ×10³ = {:.4}",
                trajectory.num_steps(),
                if result.diverged { " (diverged, truncated)" } else { "" },
                metrics.rmse_all_position
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let model = Model::load(&ckpt)?;
            let dataset = Dataset::open(&data)?;
            let text = eval_report(&model, &dataset)?;
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::MeshReport { data, lambda, traj } => {
            let dataset = Dataset::open(&data)?;
            let trajectory = dataset.load(traj)?;
            let sample = hcmt::mesh::build_sample(
                &trajectory.topology,
                &trajectory.states[0],
                dataset.contact_radius(),
            )?;
            let hierarchy = hcmt::hierarchy::build_hierarchy(
                &sample,
                &trajectory.topology,
                &trajectory.states[0],
                lambda,
            )?;
            println!("level\tnodes\tedges\tmin_angle\tmax_angle\tscaled_jacobian");
            for (lv, q) in hierarchy.levels.iter().zip(hierarchy.quality(&trajectory.topology)) {
                println!(
                    "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.4}",
                    lv.level,
                    lv.num_nodes(),
                    lv.mesh_edges.len() / 2,
                    q.min_angle_deg,
                    q.max_angle_deg,
                    q.mean_scaled_jacobian
                );
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let report = hcmt::model::gradcheck(seed)?;
            println!(
                "checked {} parameters in {:.1}s: max relative error {:.3e} (worst at {})",
                report.params_checked, report.seconds, report.max_rel_err, report.worst_param
            );
            if report.max_rel_err < 1e-5 {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed: {:.3e} ≥ 1e-5",
                    report.max_rel_err
                )))
            }
        }
        Command::Plot { rollout, out } => {
            let file = read_rollout_file(&rollout)?;
            let n = render_rollout(&file, &out)?;
            println!("wrote {n} images to {}", out.display());
            Ok(())
        }
    }
}

fn eval_report(model: &Model, dataset: &Dataset) -> hcmt::Result<String> {
    let radius = model.config.radius.unwrap_or_else(|| dataset.contact_radius());
    let test_idx = dataset.split_indices("test");
    if test_idx.is_empty() {
        return Err(Error::Dataset("dataset has no test trajectories".into()));
    }
    let name = dataset
        .dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());

    let mut model_avg = RolloutMetrics::default();
    let mut base_avg = RolloutMetrics::default();
    let mut diverged = 0usize;
    for &k in &test_idx {
        let trajectory = dataset.load(k)?;
        let kinds = &trajectory.topology.kinds;
        let r = rollout(model, &trajectory, radius, 0)?;
        if r.diverged {
            diverged += 1;
        }
        let m = evaluate(&r.states, &trajectory.states, kinds, 0)?;
        let b = evaluate(
            &constant_velocity_rollout(&trajectory, 0).states,
            &trajectory.states,
            kinds,
            0,
        )?;
        for (avg, cur) in [(&mut model_avg, m), (&mut base_avg, b)] {
            avg.rmse1_position += cur.rmse1_position / test_idx.len() as f64;
            avg.rmse1_stress += cur.rmse1_stress / test_idx.len() as f64;
            avg.rmse_all_position += cur.rmse_all_position / test_idx.len() as f64;
            avg.rmse_all_stress += cur.rmse_all_stress / test_idx.len() as f64;
        }
    }

    let mut out = String::from("metric\tdataset\tmodel\tposition\tstress\n");
    for (metric, m, b) in [
        (
            "RMSE-1 x1e3",
            (model_avg.rmse1_position, model_avg.rmse1_stress),
            (base_avg.rmse1_position, base_avg.rmse1_stress),
        ),
        (
            "RMSE-all x1e3",
            (model_avg.rmse_all_position, model_avg.rmse_all_stress),
            (base_avg.rmse_all_position, base_avg.rmse_all_stress),
        ),
    ] {
        out.push_str(&format!("{metric}\t{name}\tconstant-velocity\t{:.4}\t{:.4}\n", b.0, b.1));
        out.push_str(&format!("{metric}\t{name}\thcmt\t{:.4}\t{:.4}\n", m.0, m.1));
    }
    if diverged > 0 {
        out.push_str(&format!(
            "# {diverged} of {} rollouts diverged and were truncated\n",
            test_idx.len()
        ));
    }
    Ok(out)
}
