use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use camforge::bench::{
    bench_csv, dataset_files, evaluate_methods, generate_dataset, score_map, BenchConfig, BenchRow,
    LocalizationScore, SynthConfig, TrainOutcome,
};
use camforge::cam::{
    self, activation_profile, CamRequest, CamResult, ClassSelector, LayerSelection, LayerSet, Method,
};
use camforge::model_io::{decode_image, encode_tensor_png, load_model, weights_bytes, Manifest};
use camforge::render::{overlay_pixels, render_grid, render_overlay, render_profile};
use camforge::{Network, Tensor};

use super::{
    CliError, CompareArgs, DatasetArgs, DemoArgs, ExplainArgs, ModelArgs, ProfileArgs, TrainArgs,
};

/// Files relative to the output directory, in write order.
pub type Outputs = Vec<(String, Vec<u8>)>;

pub fn write_outputs(dir: &Path, files: &Outputs) -> Result<(), CliError> {
    let io = |p: &Path, e| CliError::file(format!("--out {}", dir.display()), camforge::Error::Io { path: p.into(), source: e });
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

struct Loaded {
    net: Network,
    image: Tensor,
    input: Tensor,
    class: ClassSelector,
}

fn load(a: &ModelArgs) -> Result<Loaded, CliError> {
    let net = load_model(&a.model, &a.weights)
        .map_err(|e| CliError::file(format!("--model {} / --weights {}", a.model.display(), a.weights.display()), e))?;
    let image = decode_image(&a.image).map_err(|e| CliError::file(format!("--image {}", a.image.display()), e))?;
    if image.shape() != net.spec().input_shape.as_slice() {
        return Err(CliError::usage(format!(
            "--image {}: shape {:?} does not match model input {:?}",
            a.image.display(),
            image.shape(),
            net.spec().input_shape
        )));
    }
    let input = net.spec().preprocess.apply(&image)?;
    let class = a
        .class
        .parse::<ClassSelector>()
        .map_err(|e| CliError::usage(format!("--class: {e}")))?;
    Ok(Loaded { net, image, input, class })
}

fn parse_layers(s: &str) -> Result<LayerSelection, CliError> {
    s.parse().map_err(|e| CliError::usage(format!("--layers: {e}")))
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(CliError::usage(format!("--alpha {alpha} outside [0, 1]")))
    }
}

fn label(net: &Network, c: usize) -> String {
    match net.spec().class_labels.get(c) {
        Some(l) => format!("{c} ({l})"),
        None => c.to_string(),
    }
}

fn report(net: &Network, method: Method, res: &CamResult, per_layer_normalize: bool) -> String {
    let mut s = String::new();
    writeln!(s, "method: {method}").unwrap();
    writeln!(s, "predicted: {}", label(net, res.score.predicted)).unwrap();
    writeln!(s, "predicted_probability: {:?}", res.score.probabilities[res.score.predicted]).unwrap();
    writeln!(s, "explained_class: {}", label(net, res.class_index)).unwrap();
    writeln!(s, "explained_probability: {:?}", res.score.probabilities[res.class_index]).unwrap();
    writeln!(s, "explained_logit: {:?}", res.score.logits[res.class_index]).unwrap();
    writeln!(s, "layers: {}", res.heatmap.layers.join(",")).unwrap();
    if method == Method::CombiCam {
        writeln!(s, "per_layer_normalize: {per_layer_normalize}").unwrap();
    }
    writeln!(s, "map_max: {:?}", res.heatmap.values.max()).unwrap();
    s
}

pub fn explain(a: &ExplainArgs) -> Result<Outputs, CliError> {
    check_alpha(a.alpha)?;
    let layers = match &a.layers {
        Some(s) => parse_layers(s)?,
        None if a.method.is_single_layer() => LayerSelection::LastOnly,
        None => LayerSelection::AllBlocks,
    };
    let l = load(&a.model)?;
    let mut req = CamRequest::new(a.method).class(l.class).layers(layers);
    req.per_layer_normalize = a.per_layer_normalize;
    let res = cam::explain(&l.net, &l.input, &req)?;
    Ok(vec![
        ("overlay.png".into(), render_overlay(&l.image, &res.heatmap.values, a.alpha)?),
        ("heatmap.cten".into(), res.heatmap.values.to_bytes()),
        ("report.txt".into(), report(&l.net, a.method, &res, a.per_layer_normalize).into_bytes()),
    ])
}

pub fn profile(a: &ProfileArgs) -> Result<Outputs, CliError> {
    let l = load(&a.model)?;
    let spec = l.net.spec();
    let c = l.class.resolve(spec, || Ok(l.net.forward(&l.input)?.predicted))?;
    let (_, recs) = l.net.explain_pass(&l.input, c)?;
    let prof = activation_profile(&spec.blocks(), &recs)?;
    let (png, csv) = render_profile(&prof)?;
    Ok(vec![("profile.png".into(), png), ("profile.csv".into(), csv.into_bytes())])
}

pub fn compare(a: &CompareArgs) -> Result<Outputs, CliError> {
    check_alpha(a.alpha)?;
    let multi = match &a.layers {
        Some(s) => parse_layers(s)?,
        None => LayerSelection::AllBlocks,
    };
    let l = load(&a.model)?;
    let single = match LayerSet::resolve(l.net.spec(), &multi)? {
        set if set.len() == 1 => multi.clone(),
        _ => LayerSelection::LastOnly,
    };
    let (h, w) = l.net.spec().spatial_size();
    if let Some(b) = a.bbox {
        let b = b.0;
        if b.top + b.height > h || b.left + b.width > w {
            return Err(CliError::usage(format!("--bbox {b:?} exceeds the {h}x{w} input")));
        }
    }
    let mut files = Outputs::new();
    let mut panels = Vec::new();
    let mut rows = Vec::new();
    for method in Method::ALL {
        let layers = if method.is_single_layer() { single.clone() } else { multi.clone() };
        let mut req = CamRequest::new(method).class(l.class.clone()).layers(layers.clone());
        req.per_layer_normalize = a.per_layer_normalize;
        let res = cam::explain(&l.net, &l.input, &req)?;
        let map = &res.heatmap.values;
        panels.push(overlay_pixels(&l.image, map, a.alpha)?);
        files.push((format!("overlay_{method}.png"), render_overlay(&l.image, map, a.alpha)?));
        files.push((format!("heatmap_{method}.cten"), map.to_bytes()));
        if let Some(b) = a.bbox {
            rows.push(BenchRow {
                method,
                layers,
                score: LocalizationScore::from_scores(&[score_map(map, &b.0)?]),
            });
        }
    }
    files.push(("grid.png".into(), render_grid(&panels, w, h)?));
    if a.bbox.is_some() {
        files.push(("scores.csv".into(), bench_csv(&rows).into_bytes()));
    }
    Ok(files)
}

fn model_files(net: &Network) -> Outputs {
    vec![
        ("model.json".into(), Manifest::from_network(net).to_json().into_bytes()),
        ("model.cwgt".into(), weights_bytes(net)),
    ]
}

fn train_log(out: &TrainOutcome) -> String {
    let mut s = String::from("epoch,mean_loss,held_out_accuracy\n");
    for e in &out.history {
        writeln!(s, "{},{:?},{:?}", e.epoch, e.mean_loss, e.held_out_accuracy).unwrap();
    }
    s
}

pub fn train(a: &TrainArgs, bench: bool) -> Result<Outputs, CliError> {
    let mut cfg = BenchConfig { seed: a.seed, ..BenchConfig::default() };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        if !lr.is_finite() || lr < 0.0 {
            return Err(CliError::usage(format!("--learning-rate {lr} must be finite and non-negative")));
        }
        cfg.train.learning_rate = lr;
    }
    let outcome = cfg.train_reference()?;
    let mut files = model_files(&outcome.network);
    files.push(("train_log.csv".into(), train_log(&outcome).into_bytes()));
    if bench {
        let rows = evaluate_methods(&outcome.network, &cfg.held_out_scenes()?)?;
        files.push(("bench.csv".into(), bench_csv(&rows).into_bytes()));
    }
    Ok(files)
}

pub fn dataset(a: &DatasetArgs) -> Result<Outputs, CliError> {
    let cfg = SynthConfig { count: a.count, seed: a.seed, ..SynthConfig::default() };
    Ok(dataset_files(&generate_dataset(&cfg)?)?)
}

pub fn demo(a: &DemoArgs) -> Result<Outputs, CliError> {
    let cfg = BenchConfig { seed: a.seed, ..BenchConfig::default() };
    let net = cfg.initial_network()?;
    let scene = generate_dataset(&SynthConfig { count: 1, seed: a.seed, ..cfg.synth })?.remove(0);
    let b = scene.pattern_bbox;
    let mut files = model_files(&net);
    files.push(("scene.png".into(), encode_tensor_png(&scene.image)?));
    files.push((
        "scene.txt".into(),
        format!("class {}\nbbox {},{},{},{}\n", scene.pattern_class, b.top, b.left, b.height, b.width).into_bytes(),
    ));
    Ok(files)
}
