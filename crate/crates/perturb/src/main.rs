// Control experiment: perturb a pretrained checkpoint with Gaussian noise whose
// per-tensor RMS matches the delta produced by a short DPO run, then save it so
// the CLI can evaluate the perturbed model. Distinguishes "any small parameter
// movement wrecks TPR" from "DPO's direction specifically wrecks TPR".
use locgen::model::{load_checkpoint, save_checkpoint};
use locgen::rng::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // usage: perturb <pre.ckpt> <dpo.ckpt> <out.ckpt> <seed>
    let (pre_path, dpo_path, out_path, seed) = (&args[1], &args[2], &args[3], args[4].parse::<u64>().unwrap());

    let (mut pre, _) = load_checkpoint(pre_path.as_ref()).unwrap();
    let (dpo, _) = load_checkpoint(dpo_path.as_ref()).unwrap();

    let mut rng = Rng::new(seed);
    let mut total_sq = 0f64;
    let mut total_n = 0usize;
    for (ti, (p, d)) in pre.tensors_mut().iter_mut().zip(dpo.tensors().iter()).enumerate() {
        let pd = p.data_mut();
        let dd = d.data();
        let n = pd.len();
        let sq: f64 = pd.iter().zip(dd).map(|(a, b)| { let e = f64::from(*a - *b); e * e }).sum();
        let rms = (sq / n as f64).sqrt();
        total_sq += sq;
        total_n += n;
        let mut s = rng.split(ti as u64);
        for v in pd.iter_mut() {
            *v += (rms * s.normal()) as f32;
        }
    }
    eprintln!(
        "global delta rms {:.3e} over {} params; injected per-tensor-matched gaussian noise (seed {seed})",
        (total_sq / total_n as f64).sqrt(),
        total_n
    );
    save_checkpoint(out_path.as_ref(), &pre, &serde_json::json!({"role": "perturb-control"})).unwrap();
}
