use poroflow::cell_problems::solve_cell_problems;
use poroflow::geometry::InclusionShape;
use poroflow::linalg::SolveOptions;

fn main() {
    let opts = SolveOptions::default();
    for shape in [InclusionShape::Circle { radius: 0.25 }, InclusionShape::TiltedEllipse] {
        println!("shape {shape:?}");
        for res in [64usize, 128, 256, 512] {
            let t = std::time::Instant::now();
            let sol = solve_cell_problems(&shape, res, &opts).unwrap();
            println!(
                "  res {res}: k11 {:.10e} k12 {:.10e} k21 {:.10e} k22 {:.10e} poro {:.6} ({:.1?})",
                sol.k[0][0],
                sol.k[0][1],
                sol.k[1][0],
                sol.k[1][1],
                sol.porosity,
                t.elapsed()
            );
        }
    }
}
