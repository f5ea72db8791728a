use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use rescalekit::dispersion::{dispersed_conv, solve_dispersion, CalibrationSet, DispersionOperator, DispersionParams};
use rescalekit::dten::DtenArray;
use rescalekit::redilation::fractional_redilated_conv;
use rescalekit::render::to_gray8;
use rescalekit::sampler::{dump_steps, sample as run_sampler, SamplerConfig};
use rescalekit::tensor::{conv2d_same, impulse_response, ImpulseResponse, SUPPORT_THRESHOLD};
use rescalekit::tiled::{tile_mean_gap, tiled_apply, GnConvStack, NormNetwork, TileLayout};
use rescalekit::unet::plan::{AdaptationPlan, ConvMode};
use rescalekit::unet::weights::WeightStore;
use rescalekit::unet::{presets, UNet, UNetConfig};
use rescalekit::{Kernel, Tensor};

use crate::failure::{Context, Failure};
use crate::image::{heatmap, write_png};
use crate::{DisperseArgs, ErfArgs, InitArgs, ModelKind, Report, SampleArgs, TileArgs, Toggle};

fn ok(text: String, json: serde_json::Value) -> Result<Report, Failure> {
    Ok(Report { text, json, failed: false })
}

/// A plan file, or a reference setting by name. Operator paths resolve
/// against `operators`, else the plan file's directory, else the working
/// directory.
pub fn load_plan(spec: &str, operators: Option<&Path>) -> Result<(AdaptationPlan, Option<PathBuf>), Failure> {
    let path = Path::new(spec);
    if path.exists() {
        let plan = AdaptationPlan::load(path).at(path)?;
        let dir = operators.map(Path::to_path_buf).or_else(|| path.parent().map(Path::to_path_buf));
        return Ok((plan, dir));
    }
    match presets::plan(spec) {
        Some(plan) => Ok((plan, operators.map(Path::to_path_buf))),
        None => Err(Failure::io(format!(
            "{spec}: no such plan file or reference setting (known: {})",
            presets::NAMES.join(", ")
        ))),
    }
}

fn load_unet(path: &Path) -> Result<UNet, Failure> {
    let store = WeightStore::load(path).at(path)?;
    UNet::from_store_config(&store).at(path)
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::config(format!("size must look like WxH, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn hex_digest(t: &Tensor) -> String {
    Sha256::digest(t.to_le_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn disperse(a: &DisperseArgs) -> Result<Report, Failure> {
    let params = DispersionParams::new(a.r, a.r_prime, a.d, a.eta)?;
    let calib = CalibrationSet::white_noise(a.patches, a.patch_size, a.seed)?;
    let op = solve_dispersion(params, &calib)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    op.save(&a.out).at(&a.out)?;
    let sidecar = rescalekit::dispersion::sidecar_path(&a.out);
    let text = format!(
        "operator {}x{} -> {}x{} at d={} eta={}\nstructure residual {:.6e}\npixel residual     {:.6e}\nwrote {} and {}\n",
        a.r,
        a.r,
        a.r_prime,
        a.r_prime,
        a.d,
        a.eta,
        op.structure_residual,
        op.pixel_residual,
        a.out.display(),
        sidecar.display()
    );
    ok(
        text,
        json!({
            "r": a.r, "r_prime": a.r_prime, "d": a.d, "eta": a.eta, "seed": a.seed,
            "patches": a.patches, "patch_size": a.patch_size,
            "structure_residual": op.structure_residual,
            "pixel_residual": op.pixel_residual,
            "operator": a.out, "sidecar": sidecar,
        }),
    )
}

pub fn sample(a: &SampleArgs) -> Result<Report, Failure> {
    let (plan, dir) = load_plan(&a.plan, a.operators.as_deref())?;
    let net = load_unet(&a.weights)?;
    let c = net.config().in_channels;
    let latent = match (&a.size, plan.latent) {
        (Some(s), _) => {
            let (w, h) = parse_size(s)?;
            [c, h, w]
        }
        (None, Some(l)) => l,
        (None, None) => [c, net.config().sample_size, net.config().sample_size],
    };
    if latent[0] != c {
        return Err(Failure::config(format!("plan latent has {} channels, model expects {c}", latent[0])));
    }
    let resolved = net.resolve(&plan, dir.as_deref())?;
    let mut cfg = SamplerConfig::from_plan(&plan, a.seed, latent);
    if let Some(steps) = a.steps {
        cfg.steps = steps;
        cfg.tau = cfg.tau.min(steps);
    }
    cfg.class_id = a.class;
    cfg.record_steps = a.dump_steps.is_some();
    cfg.validate()?;

    let out = run_sampler(&net, &resolved, &cfg)?;
    write_png(&to_gray8(&out.latent, -1.0, 1.0)?, &a.out)?;
    if let Some(path) = &a.latent_out {
        let [n, c, h, w] = out.latent.shape();
        DtenArray::new(vec![n, c, h, w], out.latent.data().to_vec())?.save(path).at(path)?;
    }
    let dumped = match &a.dump_steps {
        Some(dir) => dump_steps(&out, dir).at(dir)?.len(),
        None => 0,
    };
    let digest = hex_digest(&out.latent);
    let rms = out.latent.rms();
    let mut text = format!(
        "latent {}x{}x{}, {} steps (tau {}), guidance {} ({:?}), seed {}\nrms {rms:.4}  sha256 {digest}\nwrote {}\n",
        latent[0], latent[1], latent[2], cfg.steps, cfg.tau, cfg.guidance.w, cfg.guidance.mode, a.seed,
        a.out.display()
    );
    if let Some(dir) = &a.dump_steps {
        let _ = writeln!(text, "wrote {dumped} step images to {}", dir.display());
    }
    ok(
        text,
        json!({
            "latent": latent, "steps": cfg.steps, "tau": cfg.tau, "seed": a.seed, "class": a.class,
            "guidance": cfg.guidance, "adapted_blocks": plan.adapted_blocks().iter().map(|b| b.to_string()).collect::<Vec<_>>(),
            "rms": rms, "sha256": digest, "out": a.out, "step_images": dumped,
        }),
    )
}

fn random_kernel(r: usize, seed: u64) -> Result<Kernel, Failure> {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let taps = (0..r * r)
        .map(|_| {
            let m: f32 = g.random_range(0.5..1.5);
            if g.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Ok(Kernel::single(r, taps)?)
}

/// Entries present in `b` but not in `a`, each against its own peak.
fn gap_fill(a: &ImpulseResponse, b: &ImpulseResponse) -> usize {
    let (ca, cb) = (a.response.max_abs() * SUPPORT_THRESHOLD, b.response.max_abs() * SUPPORT_THRESHOLD);
    if a.response.shape() != b.response.shape() {
        return 0;
    }
    a.response.data().iter().zip(b.response.data()).filter(|(x, y)| **x <= ca && **y > cb).count()
}

fn ir_json(ir: &ImpulseResponse) -> serde_json::Value {
    json!({
        "support_width": ir.support_width,
        "support_height": ir.support_height,
        "nonzero": ir.nonzero_count,
        "truncated": ir.truncated,
    })
}

fn describe(mode: &ConvMode) -> String {
    match mode {
        ConvMode::Plain => "plain".into(),
        ConvMode::Redilate(d) => format!("redilate d={d}"),
        ConvMode::Disperse(d, op) => format!("disperse {}->{} d={d}", op.r(), op.r_prime()),
    }
}

pub fn erf(a: &ErfArgs) -> Result<Report, Failure> {
    if a.extent < 3 {
        return Err(Failure::config("--extent must be at least 3"));
    }
    let report = match (a.kernel, &a.plan) {
        (Some(r), None) => erf_kernel(a, r)?,
        (None, Some(plan)) => erf_plan(a, plan)?,
        _ => return Err(Failure::config("erf needs either --kernel R or --plan PLAN")),
    };
    Ok(report)
}

fn erf_kernel(a: &ErfArgs, r: usize) -> Result<Report, Failure> {
    let seed = a.seed.ok_or_else(|| Failure::config("--seed is required to draw the probe kernel"))?;
    let k = random_kernel(r, seed)?;
    let e = a.extent;
    let plain = impulse_response(|h| conv2d_same(h, &k, 1), 1, e)?;
    let redilated = impulse_response(|h| fractional_redilated_conv(h, &k, a.d), 1, e)?;
    let mut rows = vec![("plain".to_string(), plain.clone()), (format!("redilate d={}", a.d), redilated.clone())];
    let mut filled = None;
    if let Some(path) = &a.operator {
        let op = DispersionOperator::load(path).at(path)?;
        let dispersed = impulse_response(|h| dispersed_conv(h, &k, &op, a.d), 1, e)?;
        filled = Some(gap_fill(&redilated, &dispersed));
        rows.push((format!("disperse {}->{} d={}", op.r(), op.r_prime(), a.d), dispersed));
    }
    if let Some(out) = &a.out {
        let panels: Vec<Tensor> = rows.iter().map(|(_, ir)| ir.response.clone()).collect();
        write_png(&heatmap(&panels), out)?;
    }

    let mut text = format!("{r}x{r} kernel (seed {seed}), probe {e}x{e}\n");
    for (name, ir) in &rows {
        let _ = writeln!(
            text,
            "  {name:<22} width {:>3}  nonzero {:>4}{}",
            ir.support_width,
            ir.nonzero_count,
            if ir.truncated { "  (truncated)" } else { "" }
        );
    }
    if let Some(n) = filled {
        let _ = writeln!(text, "  gap fill: {n} entries beyond the re-dilated support");
    }
    let json = json!({
        "kernel": r, "d": a.d, "seed": seed, "extent": e,
        "responses": rows.iter().map(|(name, ir)| json!({ "name": name, "response": ir_json(ir) })).collect::<Vec<_>>(),
        "gap_fill": filled,
    });
    ok(text, json)
}

fn erf_plan(a: &ErfArgs, spec: &str) -> Result<Report, Failure> {
    let (plan, dir) = load_plan(spec, a.operators.as_deref())?;
    let net = match (&a.weights, a.seed) {
        (Some(path), _) => load_unet(path)?,
        (None, Some(seed)) => UNet::random(&UNetConfig::default(), seed)?,
        (None, None) => return Err(Failure::config("erf --plan needs --weights or --seed")),
    };
    let resolved = net.resolve(&plan, dir.as_deref())?;
    let mut layers = Vec::new();
    let mut panels = Vec::new();
    let mut text = format!("plan {spec}, step {}, probe {}x{}\n", a.step, a.extent, a.extent);
    for (block, _) in resolved.adapted() {
        for layer in net.block_convs(*block) {
            let mode = layer.mode(&resolved, a.step);
            if mode.is_plain() {
                continue;
            }
            let c = layer.kernel.in_channels();
            let plain = impulse_response(|h| layer.apply(h, &ConvMode::Plain), c, a.extent)?;
            let adapted = impulse_response(|h| layer.apply(h, &mode), c, a.extent)?;
            let filled = gap_fill(&plain, &adapted);
            let _ = writeln!(
                text,
                "  {:<44} {:<22} width {} -> {}  nonzero {} -> {}{}",
                layer.path,
                describe(&mode),
                plain.support_width,
                adapted.support_width,
                plain.nonzero_count,
                adapted.nonzero_count,
                if adapted.truncated { "  (truncated)" } else { "" }
            );
            layers.push(json!({
                "path": layer.path, "block": block.to_string(), "mode": describe(&mode),
                "plain": ir_json(&plain), "adapted": ir_json(&adapted), "gap_fill": filled,
            }));
            panels.push(adapted.response);
        }
    }
    if layers.is_empty() {
        text.push_str("  no layer is adapted at this step\n");
    }
    if let (Some(out), false) = (&a.out, panels.is_empty()) {
        write_png(&heatmap(&panels), out)?;
    }
    ok(text, json!({ "plan": spec, "step": a.step, "extent": a.extent, "layers": layers }))
}

fn load_tensor(path: &Path) -> Result<Tensor, Failure> {
    let arr = DtenArray::load(path).at(path)?;
    let shape = match arr.dims[..] {
        [n, c, h, w] => [n, c, h, w],
        [c, h, w] => [1, c, h, w],
        _ => return Err(Failure::config(format!("{}: expected a rank 3 or 4 tensor, got {:?}", path.display(), arr.dims))),
    };
    Ok(Tensor::new(shape, arr.data)?)
}

fn parse_range(s: &str) -> Result<(f32, f32), Failure> {
    let bad = || Failure::config(format!("range must look like lo,hi, got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f32 = hi.trim().parse().map_err(|_| bad())?;
    if !(hi > lo) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn tile(a: &TileArgs) -> Result<Report, Failure> {
    let (lo, hi) = parse_range(&a.range)?;
    let x = load_tensor(&a.input)?;
    let store = WeightStore::load(&a.weights).at(&a.weights)?;
    let net = GnConvStack::from_store(&store)?;
    let layout = TileLayout::square(x.height(), x.width(), a.tile, a.overlap)?;
    let sync = a.sync == Toggle::On;
    let out = tiled_apply(&net, &x, &layout, sync)?;
    let full = net.forward(&x)?;
    let diff = out.output.max_abs_diff(&full)?;
    let gap = tile_mean_gap(&out.output, &full, &layout)?;
    write_png(&to_gray8(&out.output, lo, hi)?, &a.out)?;
    if let Some(path) = &a.tensor_out {
        DtenArray::new(out.output.shape().to_vec(), out.output.data().to_vec())?.save(path).at(path)?;
    }
    let (rows, cols) = layout.grid();
    let mut text = format!(
        "{}x{} input, {rows}x{cols} tiles of {} with overlap {}, sync {}\nmax abs diff to full image {diff:.3e}\ntile mean gap {gap:.3e}\nwrote {}\n",
        x.height(),
        x.width(),
        a.tile,
        a.overlap,
        if sync { "on" } else { "off" },
        a.out.display()
    );
    for w in &out.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    ok(
        text,
        json!({
            "grid": [rows, cols], "tile": a.tile, "overlap": a.overlap, "sync": sync,
            "max_abs_diff": diff, "tile_mean_gap": gap, "warnings": out.warnings, "out": a.out,
        }),
    )
}

pub fn init_weights(a: &InitArgs) -> Result<Report, Failure> {
    let (store, what) = match a.kind {
        ModelKind::Unet => {
            let cfg = match &a.config {
                Some(path) => {
                    let raw = std::fs::read_to_string(path).at(path)?;
                    serde_json::from_str::<UNetConfig>(&raw)
                        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
                }
                None => UNetConfig::default(),
            };
            cfg.validate()?;
            (UNet::random_weights(&cfg, a.seed)?, "unet")
        }
        ModelKind::Decoder => {
            let channels = a
                .channels
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Failure::config(format!("channels must be comma-separated integers, got {:?}", a.channels)))?;
            if channels.len() < 2 {
                return Err(Failure::config("decoder needs at least two channel widths"));
            }
            (GnConvStack::random(&channels, a.groups, a.seed)?.to_store()?, "decoder")
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    store.save(&a.out).at(&a.out)?;
    let values: usize = store.names().map(|n| store.get(n).map_or(0, |p| p.data.len())).sum();
    ok(
        format!("{what}: {} entries, {values} values, seed {}\nwrote {}\n", store.len(), a.seed, a.out.display()),
        json!({ "kind": what, "entries": store.len(), "values": values, "seed": a.seed, "out": a.out }),
    )
}
