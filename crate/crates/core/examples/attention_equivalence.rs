//! Graph window attention: inspect one k-NN graph, then show that keeping
//! every node as a neighbour reproduces ordinary window attention.

use gabic::attention::{
    bind_params, dense_window_attention, gwam_forward, knn_graph, merge_windows, partition_windows, GwamConfig,
    GwamParams,
};
use gabic::tensor::{Graph, Rng, Tensor};

fn main() -> gabic::Result<()> {
    let (c, m) = (16, 4);
    let mut rng = Rng::new(3);
    let x = Tensor::<f64>::randn(&[1, c, 2 * m, 2 * m], 1.0, &mut rng);

    let windows = partition_windows(&x, m)?;
    let graph = knn_graph(&windows[0], 4)?;
    for i in 0..3 {
        println!("node {i} -> {:?}", graph.neighbors(i));
    }

    let full = GwamConfig {
        k: m * m,
        include_self: true,
        ..GwamConfig::new(m)
    };
    let params = GwamParams::<f64>::random(full.clone(), c, 1.0, &mut rng)?;
    let mut g = Graph::new();
    let heads = bind_params(&mut g, &params, false);
    let xv = g.constant(x.clone());
    let y = gwam_forward(&mut g, xv, &full, &heads)?;

    let h = &params.heads[0];
    let dense = windows
        .iter()
        .map(|w| dense_window_attention(w, &h.theta, &h.phi, &h.g, &h.z))
        .collect::<gabic::Result<Vec<_>>>()?;
    let dense = merge_windows(&dense, m, [1, c, 2 * m, 2 * m])?;
    println!("k = M^2 with self loops: max |knn - dense| = {:.2e}", g.value(y).max_abs_diff(&dense));
    Ok(())
}
