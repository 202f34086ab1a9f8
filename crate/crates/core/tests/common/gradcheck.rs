use flowedit::autograd::{Tape, Var};
use flowedit::flow::{TrainingBatch, cfm_loss};
use flowedit::model::{ArchConfig, Model};
use flowedit::nn::Ctx;
use flowedit::rng::{self, FlowRng};
use flowedit::tensor::{Result, Tensor};
use flowedit::uvit::UViTConfig;
use rand::Rng;

const STEPS: [f64; 2] = [1e-2, 5e-3];

fn randn(r: &mut FlowRng, shape: &[usize]) -> Tensor {
    rng::normal_tensor(r, shape)
}

fn perturbed(x: &Tensor, v: &Tensor, h: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().zip(v.data()).map(|(&a, &b)| a as f64 + h * b as f64).collect();
    Tensor::from_f64(x.shape().to_vec(), &data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `g/|g| + r/|r|` over all blocks jointly: keeps a random component while
/// keeping the directional derivative away from zero.
fn probe_direction(grads: &[Tensor], random: &[Tensor]) -> Vec<Tensor> {
    let norm = |ts: &[Tensor]| ts.iter().map(|t| dot(t, t)).sum::<f64>().sqrt().max(1e-30);
    let (gn, rn) = (norm(grads), norm(random));
    grads
        .iter()
        .zip(random)
        .map(|(g, r)| {
            let data: Vec<f64> = g.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 / gn + b as f64 / rn).collect();
            Tensor::from_f64(g.shape().to_vec(), &data).unwrap()
        })
        .collect()
}

/// Central difference with one Richardson step, so truncation error is O(h^4).
fn richardson(f: impl Fn(f64) -> f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (a, b) = (d(STEPS[0]), d(STEPS[1]));
    (4.0 * b - a) / 3.0
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 { 0.0 } else { (a - b).abs() / scale }
}

/// Worst relative error between the tape's directional derivative and a
/// finite-difference estimate, over `cases` random inputs and directions.
/// `op` maps input leaves to an output of any shape; it is contracted with a
/// fixed random tensor to get a scalar.
pub fn check_op(
    shapes: &[Vec<usize>],
    cases: usize,
    seed: u64,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut r, s)).collect();
        let dirs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut r, s)).collect();
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = op(&mut tape, &vars).unwrap();
            randn(&mut r, tape.shape(out))
        };
        let eval = |xs: &[Tensor], grad: bool| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
            let out = op(&mut tape, &vars).unwrap();
            let p = tape.constant(probe.clone());
            let m = tape.mul(out, p).unwrap();
            let loss = tape.mean(m).unwrap();
            (tape, vars, loss)
        };
        let (tape, vars, loss) = eval(&inputs, true);
        let grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v).unwrap().clone()).collect();
        let dirs = probe_direction(&g, &dirs);
        let analytic: f64 = g.iter().zip(&dirs).map(|(g, d)| dot(g, d)).sum();
        let numeric = richardson(|h| {
            let xs: Vec<Tensor> = inputs.iter().zip(&dirs).map(|(x, d)| perturbed(x, d, h)).collect();
            let (tape, _, loss) = eval(&xs, false);
            tape.value(loss).item() as f64
        });
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

pub fn tiny_uvit() -> ArchConfig {
    ArchConfig::Uvit(UViTConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        prompt_length: 3,
        vocab_size: 8,
        mlp_ratio: 2,
    })
}

/// Same comparison for the full flow-matching loss with respect to every
/// model parameter at once.
pub fn check_cfm_loss(arch: ArchConfig, cases: usize, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut model = Model::init(arch.clone(), seed + case as u64).unwrap();
        for p in model.params.iter_mut() {
            let n = randn(&mut r, p.value.shape());
            p.value = perturbed(&p.value, &n, 0.3);
        }
        let b = 2;
        let shape = model.batch_shape(b);
        let l = model.prompt_length();
        let vocab = match &arch {
            ArchConfig::Uvit(c) => c.vocab_size as u32,
            ArchConfig::Mlp(_) => 1,
        };
        let batch = TrainingBatch {
            x1: randn(&mut r, &shape),
            prompts: (0..if l > 0 { b } else { 0 })
                .map(|_| (0..l).map(|_| r.random_range(0..vocab)).collect())
                .collect(),
            t: (0..b).map(|_| r.random_range(0.05..0.95)).collect(),
            noise: randn(&mut r, &shape),
        };
        let dirs: Vec<Tensor> = model.params.iter().map(|p| randn(&mut r, p.value.shape())).collect();

        let loss_at = |m: &Model, train: bool| {
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &m.params, train);
            let loss = cfm_loss(m, &mut cx, &batch, 1e-4).unwrap();
            (tape, loss)
        };
        let (tape, loss) = loss_at(&model, true);
        let grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor> = model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| grads.param(i).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect();
        let dirs = probe_direction(&g, &dirs);
        let analytic: f64 = g.iter().zip(&dirs).map(|(g, d)| dot(g, d)).sum();
        let numeric = richardson(|h| {
            let mut m = model.clone();
            for (p, d) in m.params.iter_mut().zip(&dirs) {
                p.value = perturbed(&p.value, d, h);
            }
            let (tape, loss) = loss_at(&m, false);
            tape.value(loss).item() as f64
        });
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Every differentiable primitive with representative input shapes.
pub fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let s = |v: &[usize]| v.to_vec();
    vec![
        ("add", vec![s(&[3, 4]), s(&[3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]))),
        ("sub", vec![s(&[3, 4]), s(&[3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]))),
        ("mul", vec![s(&[3, 4]), s(&[3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]))),
        ("scale", vec![s(&[5])], Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7))),
        (
            "add_broadcast",
            vec![s(&[2, 3, 4]), s(&[4])],
            Box::new(|t: &mut Tape, v: &[Var]| t.add_broadcast(v[0], v[1])),
        ),
        (
            "mul_broadcast",
            vec![s(&[2, 3, 4]), s(&[3, 4])],
            Box::new(|t: &mut Tape, v: &[Var]| t.mul_broadcast(v[0], v[1])),
        ),
        ("matmul", vec![s(&[2, 3, 4]), s(&[4, 5])], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]))),
        ("bmm", vec![s(&[2, 3, 4]), s(&[2, 4, 5])], Box::new(|t: &mut Tape, v: &[Var]| t.bmm(v[0], v[1], false))),
        (
            "bmm_transposed",
            vec![s(&[2, 3, 4]), s(&[2, 5, 4])],
            Box::new(|t: &mut Tape, v: &[Var]| t.bmm(v[0], v[1], true)),
        ),
        ("transpose", vec![s(&[2, 3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.transpose(v[0]))),
        ("permute", vec![s(&[2, 3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.permute(v[0], &[2, 0, 1]))),
        ("reshape", vec![s(&[2, 6])], Box::new(|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[3, 4]))),
        (
            "concat",
            vec![s(&[2, 3]), s(&[2, 1]), s(&[2, 2])],
            Box::new(|t: &mut Tape, v: &[Var]| t.concat(v, 1)),
        ),
        ("slice", vec![s(&[4, 5])], Box::new(|t: &mut Tape, v: &[Var]| t.slice(v[0], 1, 1, 4))),
        ("softmax", vec![s(&[3, 5])], Box::new(|t: &mut Tape, v: &[Var]| t.softmax(v[0], 1))),
        ("softmax_axis0", vec![s(&[4, 3])], Box::new(|t: &mut Tape, v: &[Var]| t.softmax(v[0], 0))),
        ("layer_norm", vec![s(&[3, 6])], Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0]))),
        ("gelu", vec![s(&[10])], Box::new(|t: &mut Tape, v: &[Var]| t.gelu(v[0]))),
        ("mean", vec![s(&[3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))),
        ("sum_sq", vec![s(&[3, 4])], Box::new(|t: &mut Tape, v: &[Var]| t.sum_sq(v[0]))),
        (
            "gather_rows",
            vec![s(&[5, 3])],
            Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[4, 0, 4, 2])),
        ),
        (
            "reweight",
            vec![s(&[2, 5, 5])],
            Box::new(|t: &mut Tape, v: &[Var]| t.reweight(v[0], 2..5, &[0, 1], 2.5)),
        ),
        (
            "attention",
            vec![s(&[2, 4, 3]), s(&[2, 4, 3]), s(&[2, 4, 3])],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.bmm(v[0], v[1], true)?;
                let s = t.scale(s, 0.5)?;
                let a = t.softmax(s, 2)?;
                let a = t.reweight(a, 1..4, &[0], 3.0)?;
                t.bmm(a, v[2], false)
            }),
        ),
    ]
}
