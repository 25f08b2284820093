use msgt_core::block::Manipulation;
use msgt_core::complexity::ratio_to_f64;
use msgt_harness::comm::{field_table, perturbation_reach};

#[test]
fn field_table_favours_messengers_from_two() {
    let rows = field_table(7, 8).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(ratio_to_f64(rows[3].swin), 110.25);
    assert_eq!(ratio_to_f64(rows[3].msg), 784.0);
    for r in &rows[1..] {
        assert!(r.msg >= r.swin, "S={}", r.shuffle);
    }
}

#[test]
fn shuffle_reaches_exactly_its_region() {
    for r in [2, 4] {
        let reach = perturbation_reach(2, r, true, Manipulation::Shuffle, 3).unwrap();
        assert_eq!(reach.grid, (2 * r, 2 * r));
        assert!(reach.fills_region(), "R={r}");
        assert!(reach.reached().iter().all(|p| reach.region.contains(p)), "R={r}");
    }
}

#[test]
fn without_messengers_windows_stay_isolated() {
    let reach = perturbation_reach(2, 2, false, Manipulation::None, 3).unwrap();
    assert!(reach.reached().is_empty());
    assert!(reach.max_change.iter().skip(1).all(|&c| c == 0.0));
}
