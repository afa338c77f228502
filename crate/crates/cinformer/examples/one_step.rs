use cinformer::config::ConfigFile;
use cinformer::graph::{Graph, Tensor};
use cinformer::model::{forward, init_model, ModelDims};
use cinformer::nn::Bound;
use cinformer::rng::SeededRng;

fn main() {
    let cfg = ConfigFile::default();
    let dims = ModelDims::from_config(&cfg).unwrap();
    let params = init_model::<f32>(&dims, 1);
    let mut rng = SeededRng::new(2);
    let data: Vec<f32> = (0..4 * 3 * 64 * 64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let image = Tensor::new(vec![4, 3, 64, 64], data).unwrap();
    let mut g: Graph<f32> = Graph::new();
    let bound = Bound::bind(&mut g, &params);
    let img = g.constant(image);
    let out = forward(&mut g, &bound, img, &dims).unwrap();
    let targets = vec![0i64; 4 * 64 * 64];
    let loss = g.cross_entropy(out.logits, &targets, None).unwrap();
    g.backward(loss).unwrap();
    println!("done {}", g.value(loss).data[0]);
}
