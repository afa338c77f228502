use cinformer::config::ConfigFile;
use cinformer::graph::{Graph, Tensor};
use cinformer::model::{forward, init_model, ModelDims};
use cinformer::nn::Bound;
use cinformer::rng::SeededRng;
use cinformer::stem::stem_forward;
use cinformer::encoder::encoder_forward;
use cinformer::decoder::decoder_forward;
use cinformer::train::{adamw_step, OptimizerState};
use std::time::Instant;

fn main() {
    let cfg = ConfigFile::default();
    let dims = ModelDims::from_config(&cfg).unwrap();
    let params = init_model::<f32>(&dims, 1);
    let mut rng = SeededRng::new(2);
    let data: Vec<f32> = (0..4 * 3 * 64 * 64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let image = Tensor::new(vec![4, 3, 64, 64], data).unwrap();

    let time = |label: &str, mut f: Box<dyn FnMut()>| {
        let t = Instant::now();
        f();
        println!("{label:24} {:?}", t.elapsed());
    };

    // component forwards
    time("stem fwd", Box::new(|| {
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let img = g.constant(image.clone());
        let _ = stem_forward(&mut g, &bound, img, &dims.stem).unwrap();
    }));
    time("stem+encoder fwd", Box::new(|| {
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let img = g.constant(image.clone());
        let p = stem_forward(&mut g, &bound, img, &dims.stem).unwrap();
        let _ = encoder_forward(&mut g, &bound, &p, &dims.encoder).unwrap();
    }));
    time("full fwd", Box::new(|| {
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let img = g.constant(image.clone());
        let p = stem_forward(&mut g, &bound, img, &dims.stem).unwrap();
        let e = encoder_forward(&mut g, &bound, &p, &dims.encoder).unwrap();
        let _ = decoder_forward(&mut g, &bound, &e, &dims.decoder).unwrap();
    }));
    time("fwd+loss+bwd", Box::new(|| {
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let img = g.constant(image.clone());
        let out = forward(&mut g, &bound, img, &dims).unwrap();
        let targets = vec![0i64; 4 * 64 * 64];
        let loss = g.cross_entropy(out.logits, &targets, None).unwrap();
        g.backward(loss).unwrap();
    }));
    let mut p2 = params.clone();
    let dims2 = dims.clone();
    let image2 = image.clone();
    let mut opt = OptimizerState::new(&p2);
    time("full step", Box::new(move || {
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &p2);
        let img = g.constant(image2.clone());
        let out = forward(&mut g, &bound, img, &dims2).unwrap();
        let targets = vec![0i64; 4 * 64 * 64];
        let loss = g.cross_entropy(out.logits, &targets, None).unwrap();
        g.backward(loss).unwrap();
        let grads = bound.grads(&g);
        adamw_step(&mut p2, &grads, &mut opt, 1e-3, 0.0).unwrap();
    }));
}
