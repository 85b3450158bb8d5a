//! Family-level contracts of the sequence models.

use attractor::implicit::BackwardMode;
use attractor::models::{param_count, Family, GridModel, InitMode, Model, ModelSpec};
use attractor::nn::Injection;
use attractor::solver::{FixedPointMap, SolverConfig};
use attractor::tasks::{gen_copy, gen_sudoku4, sudoku_batch};
use attractor::tensor::{Tape, Tensor};

const FAMILIES: [Family; 4] = [Family::Attractor, Family::Deq, Family::Looped, Family::Plain];

fn spec(family: Family) -> ModelSpec {
    ModelSpec {
        family,
        d: 16,
        d_ff: 32,
        heads: 2,
        vocab: 9,
        max_len: 8,
        looped_t: 3,
        ..ModelSpec::default()
    }
}

fn tokens() -> Vec<usize> {
    gen_copy(3, 8, 8, 11).unwrap().inputs
}

#[test]
fn closed_form_count_matches_storage() {
    for family in FAMILIES {
        for injection in [Injection::Additive, Injection::Concat, Injection::InitialOnly] {
            for sep in [true, false] {
                let s = ModelSpec {
                    injection,
                    deq_separate_head: sep,
                    ..spec(family)
                };
                assert_eq!(Model::<f32>::new(s.clone()).unwrap().param_count(), param_count(&s), "{family:?} {injection:?}");
            }
        }
    }
}

#[test]
fn separate_head_costs_one_embedding() {
    let sep = param_count(&spec(Family::Deq));
    let tied = param_count(&ModelSpec {
        deq_separate_head: false,
        ..spec(Family::Deq)
    });
    assert_eq!(sep - tied, 9 * 16);
}

#[test]
fn attractor_count_is_embed_backbone_cell() {
    let s = spec(Family::Attractor);
    let block = s.block_config().block_params();
    let plain = param_count(&spec(Family::Plain));
    assert_eq!(plain, 9 * 16 + s.n_backbone * block + 16);
    assert_eq!(param_count(&s), plain + s.n_cell * block + 16);
}

#[test]
fn doubling_ffn_width_changes_only_mlp_terms() {
    for family in FAMILIES {
        let s = spec(family);
        let wide = ModelSpec { d_ff: 64, ..s.clone() };
        let blocks = s.n_backbone + if s.has_cell() { s.n_cell } else { 0 };
        assert_eq!(param_count(&wide) - param_count(&s), blocks * 2 * 16 * 32);
    }
}

#[test]
fn zero_budget_decodes_the_proposal() {
    let model: Model<f64> = Model::new(spec(Family::Attractor)).unwrap();
    let toks = tokens();
    let out = model.forward(&toks, 3, Some(0), false).unwrap();
    let mut tape = Tape::new();
    let y0 = model.propose(&mut tape, &toks, 3).unwrap();
    let logits = model.decode(&mut tape, y0).unwrap();
    assert_eq!(&out.logits, tape.value(logits));
    assert!(out.solver.is_none());
}

#[test]
fn plain_matches_zero_budget_attractor() {
    let a: Model<f64> = Model::new(spec(Family::Attractor)).unwrap();
    let p: Model<f64> = Model::new(spec(Family::Plain)).unwrap();
    let toks = tokens();
    let pa = a.forward(&toks, 3, Some(0), false).unwrap().logits;
    let pp = p.forward(&toks, 3, None, false).unwrap().logits;
    assert_eq!(pa, pp);
}

#[test]
fn solver_presence_by_family() {
    for family in FAMILIES {
        let model: Model<f32> = Model::new(spec(family)).unwrap();
        let out = model.forward(&tokens(), 3, None, false).unwrap();
        assert_eq!(out.solver.is_some(), matches!(family, Family::Attractor | Family::Deq), "{family:?}");
        assert!(out.logits.is_finite());
        assert_eq!(out.logits.shape(), &[3, 8, 9]);
        if let Some(r) = out.solver {
            assert!(r.iterations <= model.spec.solver.t_max);
        }
    }
}

#[test]
fn diagnostics_do_not_change_logits() {
    for family in [Family::Attractor, Family::Deq] {
        let model: Model<f32> = Model::new(spec(family)).unwrap();
        let a = model.forward(&tokens(), 3, None, false).unwrap();
        let b = model.forward(&tokens(), 3, None, true).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(b.solver.unwrap().trajectory.is_some());
    }
}

#[test]
fn forward_is_deterministic() {
    for family in FAMILIES {
        let a: Model<f32> = Model::new(spec(family)).unwrap();
        let b: Model<f32> = Model::new(spec(family)).unwrap();
        let la = a.forward(&tokens(), 3, None, false).unwrap().logits;
        let lb = b.forward(&tokens(), 3, None, false).unwrap().logits;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la), bits(&lb));
    }
}

#[test]
fn deq_starts_from_zero() {
    let model: Model<f64> = Model::new(ModelSpec {
        init_mode: InitMode::Gaussian(1.0),
        ..spec(Family::Deq)
    })
    .unwrap();
    let y0 = Tensor::full(&[1, 8, 16], 0.7);
    assert_eq!(model.init_state(&y0), Tensor::zeros(&[1, 8, 16]));
}

#[test]
fn single_loop_is_one_cell_application() {
    let model: Model<f64> = Model::new(ModelSpec {
        looped_t: 1,
        ..spec(Family::Looped)
    })
    .unwrap();
    let toks = tokens();
    let out = model.forward(&toks, 3, None, false).unwrap();
    let y0 = out.proposal.unwrap();
    let (h1, _) = model.cell_map().unwrap().eval(&Tensor::zeros(y0.shape()), &y0).unwrap();
    assert_eq!(out.state, h1);
}

#[test]
fn contractive_cell_has_one_equilibrium() {
    let tol = 1e-9;
    let base = ModelSpec {
        cell_init: 0.05,
        gamma_init: 0.1,
        gamma_max: 0.1,
        solver: SolverConfig {
            tol,
            t_max: 500,
            t_min: 0,
            ..SolverConfig::default()
        },
        backward: BackwardMode::OneStep,
        ..spec(Family::Attractor)
    };
    let toks = tokens();
    let mut stars = Vec::new();
    for init_mode in [InitMode::Zero, InitMode::Gaussian(1.0), InitMode::BackboneProposal] {
        let model: Model<f64> = Model::new(ModelSpec { init_mode, ..base.clone() }).unwrap();
        let out = model.forward(&toks, 3, None, false).unwrap();
        assert!(out.solver.unwrap().converged, "{init_mode:?}");
        stars.push(out.state);
    }
    for s in &stars[1..] {
        assert!(s.dist(&stars[0]) / stars[0].norm() < 10.0 * tol);
    }
}

#[test]
fn grid_state_and_prediction_shapes() {
    let model: GridModel<f32> = GridModel::new(ModelSpec {
        vocab: 5,
        max_len: 16,
        causal: false,
        ..spec(Family::Attractor)
    })
    .unwrap();
    let batch = sudoku_batch(&gen_sudoku4(3, 6, 8, 2).unwrap());
    let s0 = model.initial_state(3);
    assert_eq!(s0.y.shape(), &[3, 16, 16]);
    let (yi, zi) = model.init.unwrap();
    for row in s0.y.data().chunks(16) {
        assert_eq!(row, model.params.value(yi).data());
    }
    for row in s0.z.data().chunks(16) {
        assert_eq!(row, model.params.value(zi).data());
    }
    assert_eq!(model.predict(&batch, 2, None).unwrap().shape(), &[3, 16, 5]);
    assert!(GridModel::<f32>::new(spec(Family::Looped)).is_err());
}
