use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn content(n: usize) -> Content {
    Content {
        piece_count: n,
        piece_size: 1000.0,
    }
}

fn leecher(n_pieces: usize) -> PeerState {
    let mut p = PeerState::new(PeerId(0), IspId(0), Role::Leecher, 20.0 * KB, 0.0, &content(n_pieces));
    p.alive = true;
    p
}

fn set(len: usize, pieces: &[usize]) -> PieceSet {
    let mut s = PieceSet::empty(len);
    for &p in pieces {
        s.insert(p);
    }
    s
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(3)
}

#[test]
fn leecher_unchokes_top_three_by_rate() {
    let mut p = leecher(4);
    let rates = [(1, 5.0), (2, 3.0), (3, 1.0), (4, 0.0), (5, 0.0)];
    for &(n, _) in &rates {
        p.add_link(PeerId(n), PieceSet::empty(4), false, true);
        p.links[&PeerId(n)].peer_interested = true;
    }
    let cfg = PeerConfig::default();
    let rate_of = |_, n: PeerId| rates.iter().find(|r| r.0 == n.0).unwrap().1 * cfg.rate_window;
    let t = p.recompute_choking(10.0, &cfg, rate_of, &mut rng());
    let mut regular = p.unchoked.clone();
    regular.sort();
    assert_eq!(regular, vec![PeerId(1), PeerId(2), PeerId(3)]);
    let opt = p.optimistic.expect("optimistic slot filled");
    assert!(opt == PeerId(4) || opt == PeerId(5));
    assert_eq!(t.unchoke.len(), 4);
    assert!(t.choke.is_empty());
    assert!(!p.links[&PeerId(1)].am_choking);
}

#[test]
fn no_interested_neighbours_means_nothing_unchoked() {
    let mut p = leecher(4);
    p.add_link(PeerId(1), PieceSet::empty(4), false, true);
    let t = p.recompute_choking(10.0, &PeerConfig::default(), |_, _| 0.0, &mut rng());
    assert!(t.is_empty());
    assert_eq!(p.unchoked_count(), 0);
}

#[test]
fn seed_rotation_serves_everyone_twice_in_three_rounds() {
    let c = content(4);
    let mut s = PeerState::new(PeerId(0), IspId(0), Role::InitialSeed, 20.0 * KB, 0.0, &c);
    for n in 1..=6 {
        s.add_link(PeerId(n), PieceSet::empty(4), false, false);
        s.links[&PeerId(n)].peer_interested = true;
    }
    let cfg = PeerConfig::default();
    let mut r = rng();
    let mut served = [0u32; 7];
    for round in 0..3 {
        s.recompute_choking(10.0 * round as f64, &cfg, |_, _| 0.0, &mut r);
        assert_eq!(s.unchoked_count(), 4);
        for &u in &s.unchoked {
            served[u.index()] += 1;
        }
    }
    assert!(served[1..].iter().all(|&c| c >= 2), "{served:?}");
}

#[test]
fn rarest_piece_is_selected() {
    let mut p = leecher(10);
    p.add_link(PeerId(1), set(10, &[7, 9]), false, true);
    p.add_link(PeerId(2), set(10, &[9]), false, true);
    p.add_link(PeerId(3), set(10, &[9]), false, true);
    assert_eq!(p.availability[7], 1);
    assert_eq!(p.availability[9], 3);
    assert_eq!(p.select_piece(PeerId(1), &mut rng()), Some(7));
}

#[test]
fn subset_neighbour_yields_no_piece_and_no_interest() {
    let mut p = leecher(10);
    p.complete_piece(1, 0.0);
    p.complete_piece(2, 0.0);
    let interested = p.add_link(PeerId(1), set(10, &[1, 2]), false, true);
    assert!(!interested);
    assert_eq!(p.select_piece(PeerId(1), &mut rng()), None);
    assert_eq!(p.interesting_count, 0);
}

#[test]
fn equal_availability_choice_is_seed_reproducible() {
    let mut p = leecher(20);
    p.add_link(PeerId(1), set(20, &[2, 4, 6, 8]), false, true);
    p.add_link(PeerId(2), set(20, &[2, 4, 6, 8]), false, true);
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..16).map(|_| p.select_piece(PeerId(1), &mut r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    let picks: std::collections::BTreeSet<_> = draw(5).into_iter().collect();
    assert!(picks.len() > 1);
}

#[test]
fn partial_piece_has_priority() {
    let mut p = leecher(10);
    p.add_link(PeerId(1), set(10, &[3, 5]), false, true);
    p.add_link(PeerId(2), set(10, &[5]), false, true);
    p.remaining[5] = 200.0;
    assert_eq!(p.select_piece(PeerId(1), &mut rng()), Some(5));
}

#[test]
fn in_flight_pieces_are_not_reselected() {
    let mut p = leecher(10);
    p.add_link(PeerId(1), set(10, &[3]), false, true);
    p.in_flight.insert(3);
    assert_eq!(p.select_piece(PeerId(1), &mut rng()), None);
}

#[test]
fn last_piece_completes_the_download() {
    let mut p = leecher(2);
    p.add_link(PeerId(1), set(2, &[0, 1]), false, true);
    assert!(!p.complete_piece(0, 10.0).completed);
    let out = p.complete_piece(1, 5000.0);
    assert!(out.completed);
    assert_eq!(out.lost_interest, vec![PeerId(1)]);
    assert_eq!(p.completion_time, Some(5000.0));
    assert_eq!(p.role, Role::Seed);
    assert!(p.complete_piece(1, 5001.0).duplicate);
}

#[test]
fn have_can_create_interest() {
    let mut p = leecher(4);
    p.add_link(PeerId(1), PieceSet::empty(4), false, true);
    assert!(p.starved());
    assert!(p.receive_have(PeerId(1), 2));
    assert!(!p.receive_have(PeerId(1), 2));
    assert_eq!(p.interesting_count, 1);
    assert!(!p.starved());
}

#[test]
fn removing_a_link_releases_availability_and_slot() {
    let mut p = leecher(4);
    p.add_link(PeerId(1), set(4, &[0, 1]), false, true);
    p.links[&PeerId(1)].peer_interested = true;
    p.fill_slots(0.0, &PeerConfig::default(), &mut rng());
    assert!(p.is_unchoked(PeerId(1)));
    p.remove_link(PeerId(1));
    assert_eq!(p.availability, vec![0; 4]);
    assert_eq!(p.interesting_count, 0);
    assert_eq!(p.unchoked_count(), 0);
}

#[test]
fn pm_fires_after_long_starvation() {
    let mut p = leecher(4);
    let mut r = rng();
    assert!(!p.pm_check(0.0, 60.0, &mut r));
    let deadline = p.pm_deadline.unwrap();
    assert!(deadline > 0.0 && deadline <= 60.0);
    assert!(!p.pm_check(deadline - 1e-6, 60.0, &mut r));
    assert!(p.pm_check(deadline, 60.0, &mut r));
    let next = p.pm_deadline.unwrap();
    assert!(next > deadline && next <= deadline + 60.0);
}

#[test]
fn useful_have_clears_pm_deadline() {
    let mut p = leecher(4);
    p.add_link(PeerId(1), PieceSet::empty(4), false, true);
    let mut r = rng();
    p.pm_check(0.0, 60.0, &mut r);
    assert!(p.pm_deadline.is_some());
    p.receive_have(PeerId(1), 0);
    assert!(!p.pm_check(10.0, 60.0, &mut r));
    assert_eq!(p.pm_deadline, None);
    assert_eq!(p.starved_since, None);
}

#[test]
fn pm_delay_is_bounded_by_t0() {
    let mut r = rng();
    for _ in 0..10_000 {
        let d = draw_delay(60.0, &mut r);
        assert!(d > 0.0 && d <= 60.0);
    }
}

#[test]
fn seeds_are_never_starved() {
    let c = content(4);
    let mut s = PeerState::new(PeerId(0), IspId(0), Role::InitialSeed, 1.0, 0.0, &c);
    s.alive = true;
    assert!(!s.starved());
    assert!(!s.pm_check(0.0, 60.0, &mut rng()));
}

#[test]
fn config_validation() {
    assert!(PeerConfig::default().validate().is_ok());
    let bad = PeerConfig {
        upload_slots: 0,
        ..PeerConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = PeerConfig {
        max_peer_set: 2,
        ..PeerConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(Content { piece_count: 0, piece_size: 1.0 }.validate().is_err());
    assert_eq!(Content::default().total_bytes(), 104_857_600.0);
}
