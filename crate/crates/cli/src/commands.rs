use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kvsvd::bounds::{random_chain, transformer_report, verify_theorem1, verify_theorem3, Activation, BoundReport, ChainSpec};
use kvsvd::compressor::{compress_model, load_compressed, save_compressed, uncompressed, CompressedModel};
use kvsvd::container::Container;
use kvsvd::densemat::Matrix;
use kvsvd::experiments::{graded_substrate, ratio_sweep, shallow_vs_progressive, shallow_vs_progressive_seeds, EvalProtocol, ShallowComparison};
use kvsvd::model::{generate_synthetic, load_model, preset, save_model, ModelConfig, SpectrumSpec};
use kvsvd::rng::{derive_seed, Rng};
use kvsvd::runtime::{cache_bytes, compare, profile_grid, seeded_prompt, seeded_prompts, CacheBytes, CompareOptions, DecodeReport};
use kvsvd::sensitivity::{
    layer_sensitivities, plan_optimal_ratio, plan_progressive, plan_uniform, plan_variance_fraction, solve_dmin, CompressionPlan,
};
use kvsvd::{Error, Result};
use serde_json::json;

use crate::args::*;
use crate::report::{Artifacts, Output};

/// Presets above this many parameters need `--allow-large`.
pub const DESK_SCALE_PARAMS: u64 = 50_000_000;

/// Outcome of one command. `contract_ok` is false when a numerical check
/// the command exists to perform failed; outputs are still written.
pub struct Done {
    pub output: Output,
    pub out_dir: PathBuf,
    pub contract_ok: bool,
}

impl Done {
    fn ok(output: Output, out_dir: &Path) -> Self {
        Done {
            output,
            out_dir: out_dir.to_path_buf(),
            contract_ok: true,
        }
    }
}

pub fn run(cmd: &Command, art: &mut Artifacts) -> Result<Done> {
    match cmd {
        Command::Gen(a) => gen(a, art),
        Command::Plan(a) => plan(a, art),
        Command::Compress(a) => compress(a, art),
        Command::DecodeCompare(a) => decode_compare(a, art),
        Command::ProfileLayer(a) => profile_layer(a, art),
        Command::ShallowVsDeep(a) => shallow_vs_deep(a, art),
        Command::VerifyBounds(a) => verify_bounds(a, art),
        Command::Memory(a) => memory(a, art),
        Command::Sweep(a) => sweep(a, art),
        Command::Replay(_) => unreachable!("replay is dispatched before run"),
    }
}

pub fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Gen(_) => "gen",
        Command::Plan(_) => "plan",
        Command::Compress(_) => "compress",
        Command::DecodeCompare(_) => "decode-compare",
        Command::ProfileLayer(_) => "profile-layer",
        Command::ShallowVsDeep(_) => "shallow-vs-deep",
        Command::VerifyBounds(_) => "verify-bounds",
        Command::Memory(_) => "memory",
        Command::Sweep(_) => "sweep",
        Command::Replay(_) => "replay",
    }
}

fn desk_config(name: &str, layers: Option<usize>, no_rope: bool, allow_large: bool) -> Result<ModelConfig> {
    let mut cfg = preset(name)?;
    if let Some(l) = layers {
        cfg.num_layers = l;
    }
    if no_rope {
        cfg.rope_enabled = false;
    }
    cfg.validate()?;
    let params = cfg.parameter_count();
    if params > DESK_SCALE_PARAMS && !allow_large {
        return Err(Error::InvalidArgument(format!(
            "preset `{name}` has about {params:.3e} parameters, above the desk-scale guard of {DESK_SCALE_PARAMS:.0e}; pass --allow-large to build it anyway",
            params = params as f64,
            DESK_SCALE_PARAMS = DESK_SCALE_PARAMS as f64
        )));
    }
    Ok(cfg)
}

fn model_spec(m: &ModelSpecArgs) -> Result<(ModelConfig, SpectrumSpec)> {
    let cfg = desk_config(&m.preset, m.layers, m.no_rope, m.allow_large)?;
    let spectrum = match m.substrate {
        Substrate::Uniform => SpectrumSpec::uniform(m.sigma_max, m.decay).with_plateau(m.plateau),
        Substrate::Graded => {
            SpectrumSpec::graded(m.sigma_max, m.decay, m.deep_decay, cfg.num_layers).with_plateau(m.plateau)
        }
        Substrate::Experiment => graded_substrate(&cfg),
    };
    spectrum.validate(cfg.num_layers)?;
    Ok((cfg, spectrum))
}

fn protocol(e: &EvalArgs) -> EvalProtocol {
    EvalProtocol {
        seed: e.eval_seed,
        prompts: e.prompts,
        prompt_len: e.prompt_len,
        steps: e.steps,
    }
}

/// Loads a plain or compressed container as a decodable model.
fn load_any(dir: &Path) -> Result<CompressedModel<f64>> {
    if Container::open(dir)?.header.compressed {
        load_compressed(dir)
    } else {
        Ok(uncompressed(&load_model(dir)?))
    }
}

fn read_plan(path: &Path) -> Result<CompressionPlan> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CompressionPlan::from_json(&s)
}

fn gen(a: &GenArgs, art: &mut Artifacts) -> Result<Done> {
    let (cfg, spectrum) = model_spec(&a.model)?;
    let w = generate_synthetic(&cfg, &spectrum, a.seed)?;
    save_model(&w, &a.out.out)?;
    art.seeds.push(a.seed);
    art.container(&a.out.out);
    let params = cfg.parameter_count();
    Ok(Done::ok(
        Output {
            json: json!({ "out": a.out.out, "seed": a.seed, "config": cfg, "spectrum": spectrum, "parameter_count": params }),
            csv: None,
            text: format!(
                "wrote {} ({} layers, {} parameters, seed {})",
                a.out.out.display(),
                cfg.num_layers,
                params,
                a.seed
            ),
        },
        &a.out.out,
    ))
}

fn plan_csv(p: &CompressionPlan) -> String {
    let mut s = String::from("l,skip,d_c,kappa_tilde\n");
    for l in &p.layers {
        let _ = writeln!(s, "{},{},{},{:e}", l.l, l.skip as u8, l.d_c, l.kappa_tilde);
    }
    s
}

fn plan_text(p: &CompressionPlan) -> String {
    let mut s = format!(
        "strategy {}, d_max {}, d_min {}, threshold {}, retained ratio {:.4}\n",
        p.strategy,
        p.d_max,
        p.d_min,
        p.threshold,
        p.retained_ratio()
    );
    let _ = writeln!(s, "{:>5} {:>5} {:>6} {:>14}", "layer", "skip", "d_c", "kappa_tilde");
    for l in &p.layers {
        let _ = writeln!(s, "{:>5} {:>5} {:>6} {:>14.6e}", l.l, l.skip, l.d_c, l.kappa_tilde);
    }
    s.pop();
    s
}

fn plan(a: &PlanArgs, art: &mut Artifacts) -> Result<Done> {
    art.input(&a.model);
    let w = load_model(&a.model)?;
    let s = layer_sensitivities(&w)?;
    let full = w.config.kv_dim();
    let d_max = a.d_max.unwrap_or(full);
    let thr = a.threshold;
    let need = |what: &str| Error::InvalidArgument(format!("strategy needs {what}"));
    let p = match a.strategy {
        StrategyArg::Progressive => {
            let d_min = match (a.target_ratio, a.d_min) {
                (Some(t), _) => solve_dmin(&s, full, d_max, thr, t)?,
                (None, Some(d)) => d,
                (None, None) => return Err(need("--d-min or --target-ratio")),
            };
            plan_progressive(&s, full, d_max, d_min, thr)?
        }
        StrategyArg::Uniform => match (a.target_ratio, a.d_min) {
            (Some(t), _) => {
                let mut found = None;
                for d in (1..=d_max.min(full)).rev() {
                    let p = plan_uniform(&s, full, d, thr)?;
                    if p.retained_ratio() <= t {
                        found = Some(p);
                        break;
                    }
                }
                match found {
                    Some(p) => p,
                    None => {
                        let floor = plan_uniform(&s, full, 1, thr)?.retained_ratio();
                        return Err(Error::Infeasible { target: t, floor });
                    }
                }
            }
            (None, Some(d)) => plan_uniform(&s, full, d, thr)?,
            (None, None) => return Err(need("--d-min or --target-ratio")),
        },
        StrategyArg::VarianceFraction => plan_variance_fraction(&w, a.alpha.ok_or_else(|| need("--alpha"))?)?,
        StrategyArg::OptimalRatio => {
            plan_optimal_ratio(&s, full, a.target_ratio.ok_or_else(|| need("--target-ratio"))?)?
        }
    };
    let json_text = p.to_json()?;
    art.write(&a.out.out, "plan.json", format!("{json_text}\n").as_bytes())?;
    Ok(Done::ok(
        Output {
            json: serde_json::from_str(&json_text)?,
            csv: Some(plan_csv(&p)),
            text: plan_text(&p),
        },
        &a.out.out,
    ))
}

fn compress(a: &CompressArgs, art: &mut Artifacts) -> Result<Done> {
    art.input(&a.model);
    art.input(&a.plan);
    let w = load_model(&a.model)?;
    let p = read_plan(&a.plan)?;
    p.validate_for(&w.config)?;
    let cm = compress_model(&w, &p)?;
    save_compressed(&cm, &a.out.out)?;
    // Read it back so a broken container fails here, not at decode time.
    let back = load_compressed(&a.out.out)?;
    art.container(&a.out.out);
    let ratio = back.retained_ratio();
    Ok(Done::ok(
        Output {
            json: json!({ "out": a.out.out, "retained_ratio": ratio, "layer_ratios": back.layer_ratios() }),
            csv: None,
            text: format!("wrote {} (retained ratio {ratio:.4})", a.out.out.display()),
        },
        &a.out.out,
    ))
}

fn decode_compare(a: &DecodeCompareArgs, art: &mut Artifacts) -> Result<Done> {
    art.input(&a.reference);
    art.input(&a.candidate);
    let r = load_any(&a.reference)?;
    let c = load_any(&a.candidate)?;
    let prompt = match &a.prompt.prompt {
        Some(p) => p.clone(),
        None => {
            art.seeds.push(a.prompt.prompt_seed);
            seeded_prompt(a.prompt.prompt_seed, a.prompt.prompt_len, r.config.vocab_size)
        }
    };
    let opts = CompareOptions {
        keep_logits: a.keep_logits,
        timing: a.timing,
    };
    let mut rep: DecodeReport = compare(&r, &c, &prompt, a.prompt.steps, opts)?;
    let k = &a.cache;
    let seq = k.seq_len.unwrap_or(rep.cache_bytes.seq_len);
    rep.cache_bytes = CacheBytes {
        reference: cache_bytes(&r.config, Some(&r.plan), k.batch, seq, k.bytes_per_elem, k.joint),
        candidate: cache_bytes(&c.config, Some(&c.plan), k.batch, seq, k.bytes_per_elem, k.joint),
        bytes_per_elem: k.bytes_per_elem,
        batch: k.batch,
        seq_len: seq,
        count_kv_jointly: k.joint,
    };
    let csv = rep.to_csv();
    art.write_json(&a.out.out, "report.json", &rep)?;
    art.write(&a.out.out, "steps.csv", csv.as_bytes())?;
    let text = format!(
        "{} steps: mean KL {:.4e}, max |logit diff| {:.4e}, top-1 agreement {:.4}, retained ratio {:.4}, cache bytes {} -> {}",
        rep.steps.len(),
        rep.mean_kl,
        rep.max_abs_logit_diff,
        rep.top1_agreement,
        rep.retained_ratio,
        rep.cache_bytes.reference,
        rep.cache_bytes.candidate
    );
    Ok(Done::ok(
        Output {
            json: serde_json::to_value(&rep)?,
            csv: Some(csv),
            text,
        },
        &a.out.out,
    ))
}

fn profile_layer(a: &ProfileArgs, art: &mut Artifacts) -> Result<Done> {
    art.input(&a.model);
    art.seeds.push(a.eval.eval_seed);
    let w = load_model(&a.model)?;
    let s = layer_sensitivities(&w)?;
    let set = protocol(&a.eval).eval_set(w.config.vocab_size);
    let grid = profile_grid(&w, &a.widths, &set)?;

    let mut csv = String::from("layer,d_c,kl\n");
    let mut text = format!("{:>5}", "layer");
    for d in &a.widths {
        let _ = write!(text, " {:>11}", format!("d_c={d}"));
    }
    for (l, row) in grid.iter().enumerate() {
        let _ = write!(text, "\n{l:>5}");
        for (d, kl) in a.widths.iter().zip(row) {
            let _ = writeln!(csv, "{l},{d},{kl:e}");
            let _ = write!(text, " {kl:>11.4e}");
        }
    }
    art.write(&a.out.out, "profile.csv", csv.as_bytes())?;
    let json = json!({
        "widths": a.widths,
        "protocol": protocol(&a.eval),
        "kappa_tilde": s.iter().map(|l| l.kappa_tilde).collect::<Vec<_>>(),
        "kl": grid,
    });
    art.write_json(&a.out.out, "profile.json", &json)?;
    Ok(Done::ok(Output { json, csv: Some(csv), text }, &a.out.out))
}

const SHALLOW_CSV_HEADER: &str =
    "seed,shallow_layers,shallow_kl,shallow_ratio,layer0_kl,layer0_ratio,progressive_kl,progressive_ratio,progressive_d_min,progressive_d_max";

fn shallow_csv(rows: &[ShallowComparison]) -> String {
    let mut s = format!("{SHALLOW_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            r.seed,
            r.shallow_layers,
            r.shallow_kl,
            r.shallow_ratio,
            r.layer0_kl,
            r.layer0_ratio,
            r.progressive_kl,
            r.progressive_ratio,
            r.progressive_d_min,
            r.progressive_d_max
        );
    }
    s
}

fn shallow_text(r: &ShallowComparison) -> String {
    format!(
        "seed {}: shallow ({} layers) KL {:.4e} at ratio {:.4} | layer 0 only KL {:.4e} at ratio {:.4} | progressive (d {}..{}) KL {:.4e} at ratio {:.4}",
        r.seed,
        r.shallow_layers,
        r.shallow_kl,
        r.shallow_ratio,
        r.layer0_kl,
        r.layer0_ratio,
        r.progressive_d_max,
        r.progressive_d_min,
        r.progressive_kl,
        r.progressive_ratio
    )
}

fn shallow_vs_deep(a: &ShallowArgs, art: &mut Artifacts) -> Result<Done> {
    let proto = protocol(&a.eval);
    let (rows, summary) = match &a.model {
        Some(dir) => {
            art.input(dir);
            let w = load_model(dir)?;
            (vec![shallow_vs_progressive(&w, 0, a.fraction, a.layer_ratio, &proto)?], None)
        }
        None => {
            let cfg = desk_config(&a.preset, None, false, false)?;
            let seeds: Vec<u64> = (0..a.seeds).collect();
            art.seeds.extend(&seeds);
            let (rows, summary) =
                shallow_vs_progressive_seeds(&cfg, &graded_substrate(&cfg), &seeds, a.fraction, a.layer_ratio, &proto)?;
            (rows, Some(summary))
        }
    };
    art.seeds.push(a.eval.eval_seed);
    let csv = shallow_csv(&rows);
    let mut text: Vec<String> = rows.iter().map(shallow_text).collect();
    if let Some(s) = &summary {
        text.push(format!(
            "mean KL shallow {:.4e} vs progressive {:.4e}; progressive better on {}/{} seeds, sign-test p = {:.3e}",
            s.mean_b, s.mean_a, s.wins, s.n, s.p_value
        ));
    }
    let json = json!({ "fraction": a.fraction, "layer_ratio": a.layer_ratio, "protocol": proto, "rows": rows, "summary": summary });
    art.write_json(&a.out.out, "comparison.json", &json)?;
    art.write(&a.out.out, "comparison.csv", csv.as_bytes())?;
    Ok(Done::ok(
        Output {
            json,
            csv: Some(csv),
            text: text.join("\n"),
        },
        &a.out.out,
    ))
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Result<Matrix<f64>> {
    Matrix::new(rows, cols, Rng::new(seed).gaussian_vec(rows * cols))
}

fn verify_bounds(a: &VerifyArgs, art: &mut Artifacts) -> Result<Done> {
    art.seeds.push(a.seed);
    let missing = |flag: &str| Error::InvalidArgument(format!("model target needs {flag}"));
    let (target, report): (serde_json::Value, BoundReport) = match a.target {
        Target::Matrix => {
            let m = gaussian(a.rows, a.cols, derive_seed(a.seed, 0))?;
            let k = a.k.unwrap_or(a.rows.min(a.cols) / 2);
            let r = verify_theorem1(&m, k, a.samples, derive_seed(a.seed, 1))?;
            (json!({ "kind": "matrix", "rows": a.rows, "cols": a.cols, "k": k }), r)
        }
        Target::Chain => {
            let spec = ChainSpec {
                max_depth: a.depth,
                max_width: a.width,
                max_norm: 1.0,
                activation: match a.activation {
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Identity => Activation::Identity,
                    ActivationArg::Silu => Activation::Silu,
                },
            };
            let (net, mut ranks) = random_chain(&spec, a.seed)?;
            if let Some(r) = &a.ranks {
                if r.len() != net.depth() {
                    return Err(Error::InvalidArgument(format!(
                        "{} ranks given for a chain of depth {}",
                        r.len(),
                        net.depth()
                    )));
                }
                ranks = r.clone();
            }
            let shapes: Vec<(usize, usize)> = net.layers.iter().map(|w| w.shape()).collect();
            let r = verify_theorem3(&net, &ranks, a.samples, derive_seed(a.seed, 1))?;
            (json!({ "kind": "chain", "activation": spec.activation, "shapes": shapes, "ranks": ranks }), r)
        }
        Target::Model => {
            let full_dir = a.model.as_ref().ok_or_else(|| missing("--model"))?;
            let comp_dir = a.compressed.as_ref().ok_or_else(|| missing("--compressed"))?;
            art.input(full_dir);
            art.input(comp_dir);
            let w = load_model(full_dir)?;
            let cm = load_compressed(comp_dir)?;
            let prompts = seeded_prompts(a.seed, a.prompts, a.prompt_len, w.config.vocab_size);
            let r = transformer_report(&w, &cm, &prompts)?;
            (json!({ "kind": "model", "retained_ratio": cm.retained_ratio() }), r)
        }
    };
    let contract_ok = report.holds || report.advisory;
    let json = json!({ "target": target, "report": report });
    art.write_json(&a.out.out, "bounds.json", &json)?;
    let text = format!(
        "bound {:.6e}, empirical max {:.6e}, slack {:.3e}, {} samples: {}{}",
        report.bound,
        report.empirical_max,
        report.slack,
        report.samples,
        if report.holds { "holds" } else { "VIOLATED" },
        if report.advisory { " (advisory: assumptions not met, nothing asserted)" } else { "" }
    );
    Ok(Done {
        output: Output { json, csv: None, text },
        out_dir: a.out.out.clone(),
        contract_ok,
    })
}

fn memory(a: &MemoryArgs, art: &mut Artifacts) -> Result<Done> {
    let configs: Vec<(String, ModelConfig)> = match &a.model {
        Some(dir) => {
            art.input(dir);
            vec![(dir.display().to_string(), Container::open(dir)?.header.config)]
        }
        None => {
            let names = if a.preset.is_empty() {
                vec!["llama3-8b".to_string(), "llama2-13b".into(), "llama3-70b".into()]
            } else {
                a.preset.clone()
            };
            names.into_iter().map(|n| preset(&n).map(|c| (n, c))).collect::<Result<_>>()?
        }
    };
    let plan = match &a.plan {
        Some(p) => {
            art.input(p);
            Some(read_plan(p)?)
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut csv = String::from("model,num_layers,kv_dim,full_bytes,bytes,ratio\n");
    let mut text = format!(
        "batch {}, seq_len {}, {} bytes/elem, {}\n{:<12} {:>6} {:>6} {:>16} {:>16} {:>7}",
        a.batch,
        a.seq_len,
        a.bytes_per_elem,
        if a.joint { "key/value counted jointly" } else { "keys and values counted separately" },
        "model",
        "layers",
        "kv_dim",
        "full_bytes",
        "bytes",
        "ratio"
    );
    for (name, cfg) in &configs {
        if let Some(p) = &plan {
            p.validate_for(cfg)?;
        }
        let full = cache_bytes(cfg, None, a.batch, a.seq_len, a.bytes_per_elem, a.joint);
        let bytes = cache_bytes(cfg, plan.as_ref(), a.batch, a.seq_len, a.bytes_per_elem, a.joint);
        let ratio = bytes as f64 / full as f64;
        let _ = writeln!(csv, "{name},{},{},{full},{bytes},{ratio}", cfg.num_layers, cfg.kv_dim());
        let _ = write!(
            text,
            "\n{name:<12} {:>6} {:>6} {full:>16} {bytes:>16} {ratio:>7.4}",
            cfg.num_layers,
            cfg.kv_dim()
        );
        rows.push(json!({
            "model": name, "num_layers": cfg.num_layers, "kv_dim": cfg.kv_dim(),
            "full_bytes": full, "bytes": bytes, "ratio": ratio,
        }));
    }
    let json = json!({
        "batch": a.batch, "seq_len": a.seq_len, "bytes_per_elem": a.bytes_per_elem,
        "count_kv_jointly": a.joint, "plan": a.plan, "rows": rows,
    });
    art.write_json(&a.out.out, "memory.json", &json)?;
    art.write(&a.out.out, "memory.txt", format!("{text}\n").as_bytes())?;
    Ok(Done::ok(Output { json, csv: Some(csv), text }, &a.out.out))
}

fn sweep(a: &SweepArgs, art: &mut Artifacts) -> Result<Done> {
    let (cfg, spectrum) = model_spec(&a.model)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    art.seeds.extend(&seeds);
    art.seeds.push(a.eval.eval_seed);
    let rows = ratio_sweep(&cfg, &spectrum, &seeds, &a.targets, &protocol(&a.eval))?;
    let mut csv = String::from("target,mean_ratio,mean_kl\n");
    let mut text = format!("{:>7} {:>10} {:>12}", "target", "mean_ratio", "mean_kl");
    for r in &rows {
        let _ = writeln!(csv, "{},{:e},{:e}", r.target, r.mean_ratio, r.mean_kl);
        let _ = write!(text, "\n{:>7} {:>10.4} {:>12.4e}", r.target, r.mean_ratio, r.mean_kl);
    }
    let json = json!({ "config": cfg, "spectrum": spectrum, "protocol": protocol(&a.eval), "seeds": seeds, "rows": rows });
    art.write_json(&a.out.out, "sweep.json", &json)?;
    art.write(&a.out.out, "sweep.csv", csv.as_bytes())?;
    Ok(Done::ok(Output { json, csv: Some(csv), text }, &a.out.out))
}
