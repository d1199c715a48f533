use pevgrid::bundled;
use pevgrid::grid::parse_case;
use pevgrid::sdp::{solve, SolveStatus, SolverOptions};
use pevgrid::sdr::{build_window_sdr, PevWindowEntry, SlotGrid, RANK_EPS};
use std::time::Instant;

fn flat_slot(net: &pevgrid::grid::Network, slot: usize, mult: f64, price: f64) -> SlotGrid {
    let base = net.base_mva;
    SlotGrid {
        slot,
        p_load_pu: net.buses.iter().map(|b| mult * b.p_load_base / base).collect(),
        q_load_pu: net.buses.iter().map(|b| mult * b.q_load_base / base).collect(),
        price_per_kwh: price,
    }
}

#[test]
fn nine_bus_single_slot_opf() {
    let net = parse_case(bundled::CASE9).unwrap();
    let t0 = Instant::now();
    let (problem, model) = build_window_sdr(&net, &[flat_slot(&net, 1, 1.0, 0.3)], &[], 0.5).unwrap();
    let sol = solve(&problem, &SolverOptions::default()).unwrap();
    println!("single slot: status {:?} iters {} obj {} in {:?}", sol.status, sol.iterations, sol.primal_objective, t0.elapsed());
    assert_eq!(sol.status, SolveStatus::Optimal);
    let slot = model.extract_slot(&net, &sol, 1, RANK_EPS).unwrap();
    println!("rank {} gap {:.3e} residual {:?} pg {:?}", slot.rank, slot.rank_gap, slot.flow_residual, slot.pg_mw);
    let total_load = 315.0;
    let total_gen: f64 = slot.pg_mw.iter().sum();
    assert!(total_gen > total_load && total_gen < total_load * 1.1);
}

#[test]
fn nine_bus_six_slot_window_with_pevs() {
    let net = parse_case(bundled::CASE9).unwrap();
    let slots: Vec<SlotGrid> = (1..=6).map(|t| flat_slot(&net, t, 0.9 + 0.05 * t as f64, 0.3 - 0.02 * t as f64)).collect();
    let pevs: Vec<PevWindowEntry> = (0..6)
        .map(|i| PevWindowEntry {
            pev_idx: i,
            id: i as u32 + 1,
            station: [1usize, 2, 3][i % 3],
            first_slot: 1 + (i % 2),
            last_slot: 6,
            target_kwh: 16.0,
            p_max_kw: 20.0,
            u_h: 0.9,
        })
        .collect();
    let t0 = Instant::now();
    let (problem, model) = build_window_sdr(&net, &slots, &pevs, 1.0).unwrap();
    println!("built {} constraints {} blocks {} scalars", problem.n_constraints(), problem.n_blocks(), problem.n_scalars());
    let sol = solve(&problem, &SolverOptions::default()).unwrap();
    println!("6-slot: status {:?} iters {} obj {} in {:?}", sol.status, sol.iterations, sol.primal_objective, t0.elapsed());
    assert_eq!(sol.status, SolveStatus::Optimal);
    for t in 1..=6 {
        let s = model.extract_slot(&net, &sol, t, RANK_EPS).unwrap();
        println!("slot {t}: rank {} gap {:.3e} residual {:?} charges {:?}", s.rank, s.rank_gap, s.flow_residual, s.charges_kw);
    }
    // Delivered energy per PEV must hit the target through the completion rows.
    let schedule = model.full_schedule(&sol);
    for e in 0..6u32 {
        let delivered: f64 = schedule.iter().filter(|(id, _, _)| *id == e + 1).map(|(_, _, kw)| 0.9 * kw).sum();
        assert!((delivered - 16.0).abs() < 1e-4, "pev {e}: delivered {delivered}");
    }
}
