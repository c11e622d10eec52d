//! Euler against the midpoint step on fields with known integrals, and the
//! evaluation count each one reports.

use tdm_edit::solvers::{
    integrate, Counting, Direction, FnField, IntegrateOptions, SolverKind, TimeGrid,
};
use tdm_edit::LatentGrid;

fn error(kind: SolverKind, steps: usize, f: fn(f32) -> f32, exact: f64) -> (f64, usize) {
    let grid = TimeGrid::uniform(steps).unwrap();
    let mut field = Counting::new(FnField(|_x: &LatentGrid, t| {
        Ok(LatentGrid::filled(1, 1, 1, f(t)))
    }));
    let rec = integrate(
        &LatentGrid::zeros(1, 1, 1),
        &grid,
        Direction::Denoising,
        kind,
        &mut field,
        IntegrateOptions::default(),
    )
    .unwrap();
    assert_eq!(rec.nfe(), field.calls);
    (
        (f64::from(rec.end().values()[0]) + exact).abs(),
        field.calls,
    )
}

type Field = fn(f32) -> f32;

fn main() {
    let fields: [(&str, Field, f64); 2] = [
        ("0.3 + 1.7t", |t| 0.3 + 1.7 * t, 0.3 + 0.85),
        ("cos 3t", |t| (3.0 * t).cos(), 3f64.sin() / 3.0),
    ];
    for (name, f, exact) in fields {
        println!("v(t) = {name}");
        println!("   N   euler err  nfe   midpoint err  nfe");
        for n in [4, 8, 16, 32, 64] {
            let (e1, c1) = error(SolverKind::Euler, n, f, exact);
            let (e2, c2) = error(SolverKind::SecondOrder, n, f, exact);
            println!("{n:4}   {e1:.3e}  {c1:4}   {e2:.3e}    {c2:4}");
        }
    }
    // Equal budgets: 28 midpoint steps cost as much as 56 Euler steps.
    let (_, mid) = error(SolverKind::SecondOrder, 28, |t| t, 0.5);
    let (_, eul) = error(SolverKind::Euler, 56, |t| t, 0.5);
    println!("28 midpoint steps: {mid} evaluations; 56 Euler steps: {eul}");
}
