//! Mask, rank-1 assembly, ball update, γ and the edit loop.

mod common;

use common::*;
use hyperedit::edit::*;
use hyperedit::hyperbolic::{norm, sigmoid, Curvature};
use hyperedit::model::{finite_diff_grad, row_norms};
use hyperedit::request::{EditRequest, Prompt, Target};
use hyperedit::Error;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn c1() -> Curvature {
    Curvature::default()
}

fn rule(space: UpdateSpace) -> UpdateRule {
    UpdateRule { space, layout: UpdateLayout::Rows }
}

/// A request whose new target is the fitted model's current answer.
fn settled_request() -> EditRequest {
    let f = fixture();
    let mut best: Option<(f64, &hyperedit::kg::Triple)> = None;
    for t in &f.data.triples {
        let p = Prompt::new(t.subject.as_str(), t.relation.as_str());
        let nll = f.model.nll(&p, &t.object).unwrap();
        if best.is_none_or(|(b, _)| nll < b) {
            best = Some((nll, t));
        }
    }
    let t = best.unwrap().1;
    let other = f.data.triples.iter().map(|x| &x.object).find(|o| **o != t.object).unwrap();
    EditRequest {
        case_id: 900,
        subject: t.subject.clone(),
        relation: t.relation.clone(),
        target_new: Target::new(t.object.as_str()),
        target_true: Target::new(other.as_str()),
        rewrite_prompts: vec![Prompt::new(t.subject.as_str(), t.relation.as_str())],
        paraphrase_prompts: vec![],
        neighborhood_prompts: vec![],
        portability_prompts: vec![],
    }
}

#[test]
fn mask_examples() {
    let zero = Array2::zeros((3, 4));
    let (g, m) = gradient_mask(&zero, 0.0);
    assert_eq!(g, vec![0.0; 3]);
    assert_eq!(m, vec![0.5; 3]);

    // row means 0.3 and 1.3 with tau_g 0.3
    let grad = array![[0.2, -0.4], [1.0, -1.6]];
    let (g, m) = gradient_mask(&grad, 0.3);
    assert!((g[0] - 0.3).abs() < 1e-15);
    assert_eq!(m[0], sigmoid(g[0] - 0.3));
    assert!((m[0] - 0.5).abs() < 1e-15);
    assert!((m[1] - Dd::ONE.sigmoid().to_f64()).abs() < 1e-15);
    assert!((m[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn assemble_examples() {
    let d = assemble_delta(&[1.0, 0.0], &[1.0, 0.0, 0.0], 1.0, &[1.0, 1.0]).unwrap();
    assert_eq!(d, array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);

    let d = assemble_delta(&[1.0, 2.0], &[3.0, 1.0], 0.5, &[0.0, 0.0]).unwrap();
    assert!(d.iter().all(|&x| x == 0.0));

    let d = assemble_delta(&[1.0, 2.0], &[3.0, 1.0], 0.5, &[1.0, 0.5]).unwrap();
    assert_eq!(d, array![[1.5, 0.5], [1.5, 0.5]]);

    assert!(assemble_delta(&[1.0, 2.0], &[1.0], 1.0, &[1.0]).is_err());
}

#[test]
fn update_examples() {
    let w = array![[0.3]];
    let out = apply_update(&w, &array![[0.2]], c1(), UpdateRule::default()).unwrap();
    let want = rat_mobius_add(&[Ratio::new(3, 10)], &[Ratio::new(1, 5)], Ratio::int(1))[0];
    assert!((out[[0, 0]] - want.to_f64()).abs() < 1e-15);
    assert!((out[[0, 0]] - 0.47170).abs() < 1e-5);

    let w = array![[0.1, 0.2], [-0.3, 0.05]];
    for space in [UpdateSpace::Mobius, UpdateSpace::Euclidean] {
        let same = apply_update(&w, &Array2::zeros((2, 2)), c1(), rule(space)).unwrap();
        assert_eq!(same, w);
    }
    // a zero delta row leaves that row bitwise untouched
    let out = apply_update(&w, &array![[0.0, 0.0], [0.4, 0.1]], c1(), UpdateRule::default()).unwrap();
    assert_eq!(out.row(0), w.row(0));

    let eu = apply_update(&w, &array![[0.1, 0.1], [0.0, 0.0]], c1(), rule(UpdateSpace::Euclidean)).unwrap();
    assert!((eu[[0, 0]] - 0.2).abs() < 1e-15 && (eu[[0, 1]] - 0.3).abs() < 1e-15);

    assert!(apply_update(&w, &Array2::zeros((3, 2)), c1(), UpdateRule::default()).is_err());
}

#[test]
fn update_instability_names_row() {
    let w = array![[0.0, 0.0], [1.0, 0.0]];
    let d = array![[0.1, 0.0], [-1.0, 0.0]];
    match apply_update(&w, &d, c1(), UpdateRule::default()) {
        Err(Error::NumericInstability { context, .. }) => assert!(context.starts_with("row 1"), "{context}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn flattened_layout() {
    let w = array![[0.1, 0.2], [0.0, 0.1]];
    let d = array![[0.05, 0.0], [0.1, -0.1]];
    let r = UpdateRule { space: UpdateSpace::Mobius, layout: UpdateLayout::Flattened };
    let out = apply_update(&w, &d, c1(), r).unwrap();
    let want = dd_mobius_add(&[0.1, 0.2, 0.0, 0.1], &[0.05, 0.0, 0.1, -0.1], 1.0);
    assert!(max_abs_diff(&out.iter().copied().collect::<Vec<_>>(), &want) < 1e-15);
    // a layer that does not fit in the ball as one vector is refused
    let big = array![[0.8, 0.0], [0.0, 0.8]];
    assert!(matches!(apply_update(&big, &d, c1(), r), Err(Error::Domain(_))));
}

#[test]
fn gamma_modes() {
    let f = fixture();
    let req = &f.data.requests[0];
    let obj = EditObjective::new(&f.model, req, 0.07).unwrap();
    let (m, n) = f.model.dims();
    let (u, v, mask) = (vec![0.1; m], vec![0.1; n], vec![1.0; m]);
    let r = UpdateRule::default();
    let g = |mode| compute_gamma(mode, &f.model, &obj, &u, &v, &mask, r, 0.0075, 10.0);
    assert_eq!(g(GammaMode::Fixed(1.0)).unwrap(), 1.0);
    assert_eq!(g(GammaMode::Fixed(0.0)).unwrap(), 0.0);
    let d = assemble_delta(&u, &v, g(GammaMode::Fixed(0.0)).unwrap(), &mask).unwrap();
    assert!(d.iter().all(|&x| x == 0.0));

    let zero_u = vec![0.0; m];
    let err = compute_gamma(GammaMode::Auto, &f.model, &obj, &zero_u, &v, &mask, r, 0.0075, 10.0);
    assert!(matches!(err, Err(Error::DegenerateKey)));
    let zero_mask = vec![0.0; m];
    let err = compute_gamma(GammaMode::Auto, &f.model, &obj, &u, &v, &zero_mask, r, 0.0075, 10.0);
    assert!(matches!(err, Err(Error::DegenerateKey)));
}

#[test]
fn auto_gamma_is_zero_at_target() {
    let f = fixture();
    let req = settled_request();
    let obj = EditObjective::new(&f.model, &req, 0.0).unwrap();
    let current = obj.loss(&f.model);
    let (m, n) = f.model.dims();
    let got = compute_gamma(GammaMode::Auto, &f.model, &obj, &vec![0.2; m], &vec![0.3; n], &vec![1.0; m], UpdateRule::default(), current, 10.0)
        .unwrap();
    assert!(got.abs() <= 1e-9);
}

#[test]
fn auto_gamma_reaches_target_when_possible() {
    let f = fixture();
    let req = &f.data.requests[1];
    let obj = EditObjective::new(&f.model, req, 0.07).unwrap();
    let before = obj.loss(&f.model);
    let (_, grad) = obj.loss_and_grad(&f.model);
    // steepest descent direction as a rank-1 update
    let u: Vec<f64> = grad.rows().into_iter().map(|r| -r.sum()).collect();
    let v = vec![1.0 / f.model.dims().1 as f64; f.model.dims().1];
    let mask = vec![1.0; u.len()];
    let target = 0.5 * before;
    let g = compute_gamma(GammaMode::Auto, &f.model, &obj, &u, &v, &mask, UpdateRule::default(), target, 10.0).unwrap();
    let mut probe = f.model.clone();
    let w = apply_update(f.model.weights(), &assemble_delta(&u, &v, g, &mask).unwrap(), f.model.curvature(), UpdateRule::default()).unwrap();
    probe.set_weights(w).unwrap();
    let after = obj.loss(&probe);
    assert!(after <= before, "{after} vs {before}");
    if g < 10.0 && g > 0.0 {
        assert!(after <= target + 1e-9);
    }
}

#[test]
fn edit_loss_terms() {
    let f = fixture();
    let req = &f.data.requests[2];
    let (nll, _) = edit_loss(&f.model, req, 0.0).unwrap();
    let direct: f64 = req.rewrite_prompts.iter().map(|p| f.model.nll(p, &req.target_new.token).unwrap()).sum::<f64>()
        / req.rewrite_prompts.len() as f64;
    assert!((nll - direct).abs() < 1e-12);
    // the KL term vanishes against itself
    let (with_kl, _) = edit_loss(&f.model, req, 0.07).unwrap();
    assert!((with_kl - nll).abs() < 1e-12);

    let bad = EditRequest { target_new: Target::new("nobody"), ..req.clone() };
    match edit_loss(&f.model, &bad, 0.07) {
        Err(Error::Vocabulary(token)) => assert_eq!(token, "nobody"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(edit_loss(&f.model, req, 1.5).is_err());
}

#[test]
fn edit_loss_gradient_matches_differences() {
    let f = fixture();
    for req in f.data.requests.iter().take(3) {
        // against an edited model so that the KL term carries gradient
        let mut current = f.model.clone();
        let (m, n) = current.dims();
        let bump = Array2::from_shape_fn((m, n), |(i, j)| 0.01 * ((i * 7 + j * 3) % 5) as f64 - 0.02);
        current.set_weights(apply_update(current.weights(), &bump, current.curvature(), UpdateRule::default()).unwrap()).unwrap();
        let obj = EditObjective::with_reference(&f.model, req, 0.07).unwrap();
        let (loss, analytic) = obj.loss_and_grad(&current);
        let numeric = finite_diff_grad(&current, |m| obj.loss(m), 1e-5).unwrap();
        let floor = 1e-6 * loss.abs().max(1.0);
        let worst = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "case {}: {worst}", req.case_id);
    }
}

#[test]
fn every_stage_fault_resets_and_restores() {
    let f = fixture();
    let req = &f.data.requests[0];
    for stage in [EditStage::Gradient, EditStage::Gnn, EditStage::Gamma, EditStage::Delta, EditStage::Apply, EditStage::Evaluate] {
        let mut model = f.model.clone();
        let mut gnn = f.gnn();
        let cfg = EditConfig { inject_fault: Some(stage), ..f.cfg.edit_config().unwrap() };
        let err = run_edit(&mut model, &f.graph, req, &mut gnn, &cfg);
        assert!(err.is_err(), "{stage:?}");
        assert!(gnn.is_at_initial(), "{stage:?}");
        assert_eq!(model.snapshot(), f.model.snapshot(), "{stage:?}");
    }
}

#[test]
fn successful_edit_resets_gnn() {
    let f = fixture();
    let mut model = f.model.clone();
    let mut gnn = f.gnn();
    let cfg = f.cfg.edit_config().unwrap();
    for req in &f.data.requests {
        run_edit(&mut model, &f.graph, req, &mut gnn, &cfg).unwrap();
        assert!(gnn.is_at_initial());
    }
}

#[test]
fn settled_request_needs_no_update() {
    let f = fixture();
    let req = settled_request();
    let mut model = f.model.clone();
    let cfg = f.cfg.edit_config().unwrap();
    let nll = model.nll(&req.rewrite_prompts[0], &req.target_new.token).unwrap();
    let out = run_edit(&mut model, &f.graph, &req, &mut f.gnn(), &cfg).unwrap();
    assert_eq!(out.cycles, 1);
    if nll <= GAMMA_TARGET_FRACTION * cfg.gnn.early_stop_loss {
        assert_eq!(out.delta_frobenius, 0.0);
        assert_eq!(model.snapshot(), f.model.snapshot());
    } else {
        assert!(out.final_loss < cfg.gnn.early_stop_loss);
    }
}

#[test]
fn outcome_json_fields() {
    let f = fixture();
    let mut model = f.model.clone();
    let out = run_edit(&mut model, &f.graph, &f.data.requests[0], &mut f.gnn(), &f.cfg.edit_config().unwrap()).unwrap();
    let v = serde_json::to_value(&out).unwrap();
    for key in ["case_id", "cycles", "final_loss", "delta_frobenius", "gamma"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["min", "mean", "max"] {
        assert!(v["mask_summary"][key].is_f64(), "{key}");
    }
    assert!(v["cycles"].is_u64());
    let plan = out.history.last().unwrap();
    for (i, &gi) in plan.grad_means.iter().enumerate() {
        assert_eq!(plan.mask[i], sigmoid(gi - f.cfg.tau_g));
    }
    let want = assemble_delta(&plan.u, &plan.v, plan.gamma, &plan.mask).unwrap();
    assert_eq!(plan.delta, want);
}

#[test]
fn sequential_edits_stay_on_the_ball() {
    let f = fixture();
    for space in [UpdateSpace::Mobius, UpdateSpace::Euclidean] {
        let mut model = f.model.clone();
        let mut gnn = f.gnn();
        let mut cfg = f.cfg.edit_config().unwrap();
        cfg.update = rule(space);
        for req in &f.data.requests {
            run_edit(&mut model, &f.graph, req, &mut gnn, &cfg).unwrap();
            let limit = model.curvature().max_norm();
            assert!(row_norms(model.weights()).iter().all(|&n| n <= limit));
            assert!(model.weight_rows().is_ok());
        }
    }
}

#[test]
fn suppressed_rows_barely_move_in_an_edit() {
    let f = fixture();
    let req = &f.data.requests[0];
    // a large threshold pushes most rows' mask below σ(-6)
    let (_, grad) = edit_loss(&f.model, req, f.cfg.kl_factor).unwrap();
    let (g, _) = gradient_mask(&grad, 0.0);
    let median = {
        let mut s = g.clone();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let cfg = EditConfig { tau_g: median + 6.0, max_cycles: 1, ..f.cfg.edit_config().unwrap() };
    let mut model = f.model.clone();
    let out = run_edit(&mut model, &f.graph, req, &mut f.gnn(), &cfg).unwrap();
    let plan = &out.history[0];
    let bound_unit = plan.gamma.abs() * plan.u.iter().fold(0.0f64, |m, x| m.max(x.abs())) * norm(&plan.v) * sigmoid(-6.0);
    let moved = row_change(f.model.weights(), model.weights());
    let mut checked = 0;
    for (i, &mi) in plan.mask.iter().enumerate() {
        if mi <= sigmoid(-6.0) {
            checked += 1;
            assert!(moved[i] <= bound_unit * (1.0 + 1e-9), "row {i}: {} > {bound_unit}", moved[i]);
        }
    }
    assert!(checked > 0);
}

fn interior_rows(m: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    (prop::collection::vec(-1.0f64..1.0, m * n), prop::collection::vec(0.0f64..0.95, m)).prop_map(move |(v, r)| {
        let mut a = Array2::from_shape_vec((m, n), v).unwrap();
        for (mut row, &ri) in a.rows_mut().into_iter().zip(&r) {
            let nn = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / nn * ri);
        }
        a
    })
}

fn shapes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_is_monotone_in_row_scale(
        grad in prop::collection::vec(-1.0f64..1.0, 12),
        row in 0usize..3,
        tau_g in -1.0f64..1.0,
    ) {
        let g = Array2::from_shape_vec((3, 4), grad).unwrap();
        prop_assume!(g.row(row).iter().any(|&x| x.abs() > 1e-3));
        let mut scaled = g.clone();
        scaled.row_mut(row).mapv_inplace(|x| 10.0 * x);
        let (_, m0) = gradient_mask(&g, tau_g);
        let (_, m1) = gradient_mask(&scaled, tau_g);
        prop_assert!(m1[row] > m0[row]);
        for i in 0..3 {
            prop_assert!(m0[i] > 0.0 && m0[i] < 1.0);
        }
    }

    #[test]
    fn delta_is_masked_outer_product(
        (m, n) in shapes(),
        seed in prop::collection::vec(-2.0f64..2.0, 20),
        gamma in -3.0f64..3.0,
    ) {
        let u: Vec<f64> = seed[..m].to_vec();
        let v: Vec<f64> = seed[6..6 + n].to_vec();
        let mask: Vec<f64> = seed[14..14 + m].iter().map(|x| sigmoid(*x)).collect();
        let d = assemble_delta(&u, &v, gamma, &mask).unwrap();
        prop_assert_eq!(d.dim(), (m, n));
        for i in 0..m {
            for j in 0..n {
                prop_assert_eq!(d[[i, j]], gamma * u[i] * v[j] * mask[i]);
            }
        }
    }

    #[test]
    fn update_rows_match_reference_and_stay_inside(
        w in interior_rows(4, 5),
        d in prop::collection::vec(-0.5f64..0.5, 20),
        c in prop::sample::select(vec![0.5, 1.0, 2.0]),
    ) {
        let cv = Curvature::new(c).unwrap();
        let w = w.mapv(|x| x / c.sqrt());
        let d = Array2::from_shape_vec((4, 5), d).unwrap();
        let out = apply_update(&w, &d, cv, UpdateRule::default()).unwrap();
        for i in 0..4 {
            let want = dd_mobius_add(&w.row(i).to_vec(), &d.row(i).to_vec(), c);
            let got = out.row(i).to_vec();
            if norm(&want) < cv.max_norm() {
                prop_assert!(max_abs_diff(&got, &want) < 1e-12);
            }
            prop_assert!(norm(&got) <= cv.max_norm());
        }
        let eu = apply_update(&w, &(&d * 10.0), cv, rule(UpdateSpace::Euclidean)).unwrap();
        prop_assert!(row_norms(&eu).iter().all(|&x| x <= cv.max_norm()));
    }

    #[test]
    fn suppressed_row_change_is_bounded(
        w in interior_rows(4, 6),
        u in prop::collection::vec(-3.0f64..3.0, 4),
        v in prop::collection::vec(-3.0f64..3.0, 6),
        logits in prop::collection::vec(-12.0f64..4.0, 4),
        gamma in -2.0f64..2.0,
    ) {
        let w = w.mapv(|x| 0.6 * x);
        let mask: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let d = assemble_delta(&u, &v, gamma, &mask).unwrap();
        let out = apply_update(&w, &d, c1(), UpdateRule::default()).unwrap();
        let bound = gamma.abs() * u.iter().fold(0.0f64, |m, x| m.max(x.abs())) * norm(&v) * sigmoid(-6.0);
        let moved = row_change(&w, &out);
        for i in 0..4 {
            if mask[i] <= sigmoid(-6.0) {
                prop_assert!(moved[i] <= bound * (1.0 + 1e-9), "row {}: {} > {}", i, moved[i], bound);
            }
        }
    }
}
