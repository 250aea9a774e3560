use onnx2hls::compose::{merge, strip_routes, ComposeError, ConfigTable};
use onnx2hls::sim::DataflowGraph;
use onnx2hls::testing::{mutate_graph, random_graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn variants(seed: u64, n: usize) -> Vec<DataflowGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, base) = random_graph(&mut rng, 8);
    let mut gs = vec![base.clone()];
    for i in 1..n {
        gs.push(mutate_graph(&mut rng, &base, &format!("v{i}")));
    }
    gs
}

#[test]
fn active_configurations_reduce_to_their_sources() {
    for seed in 0..20 {
        let gs = variants(seed, 3);
        let (md, table) = merge(&gs).unwrap();
        assert!(table.is_total_for(&md));
        for (i, g) in gs.iter().enumerate() {
            let active = strip_routes(&md.active_graph(&table, i).unwrap()).unwrap();
            assert_eq!(active.skeleton().connections.len(), g.channels.len());
            let mut want: Vec<_> = g.actors.iter().map(|a| a.kind.clone()).map(|k| format!("{k:?}")).collect();
            let mut got: Vec<_> = active.actors.iter().map(|a| format!("{:?}", a.kind)).collect();
            want.sort();
            got.sort();
            assert_eq!(got, want, "seed {seed} config {i}");
        }
    }
}

#[test]
fn config_table_json_round_trips() {
    let (md, table) = merge(&variants(3, 2)).unwrap();
    let back = ConfigTable::from_json(&table.to_json()).unwrap();
    assert_eq!(back, table);
    assert!(back.is_total_for(&md));
    assert_eq!(md.active_graph(&table, 2).unwrap_err(), ComposeError::UnknownConfig(2));
}

#[test]
fn sharing_never_exceeds_separate_graphs() {
    for seed in 0..20 {
        let gs = variants(100 + seed, 4);
        let (md, _) = merge(&gs).unwrap();
        let separate: usize = gs.iter().map(|g| g.actors.len()).sum();
        assert!(md.actor_count() < separate);
        let r = md.sharing_report();
        assert_eq!(r.shared_actor_count + r.duplicated_actor_count, md.actor_count());
    }
}

#[test]
fn empty_merge_is_rejected() {
    assert!(matches!(merge(&[]), Err(ComposeError::EmptyInput)));
}
