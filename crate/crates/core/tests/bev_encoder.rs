use bella_core::bevenc::{cell_of, encode_scene, rasterize, FrozenEncoderParams, CELL_METRES, GRID};
use bella_core::scenesim::{episode_seed, gen_episode, Actor, ActorClass, Scene, SceneConfig, Status, EXTENT};
use bella_numcore::SplitMix64;

fn random_scene(rng: &mut SplitMix64) -> Scene {
    let cfg = SceneConfig {
        forced_actor_count: Some(1 + rng.below(6) as usize),
        ..SceneConfig::default()
    };
    let ep = gen_episode(0, rng.next_u64(), &cfg);
    ep.scenes[rng.below(ep.scenes.len() as u64) as usize].clone()
}

fn cell(a: &Actor) -> (usize, usize) {
    cell_of(a.x, a.y).expect("inside grid")
}

fn centre(r: usize, c: usize) -> (f64, f64) {
    (
        EXTENT - (r as f64 + 0.5) * CELL_METRES,
        (c as f64 + 0.5) * CELL_METRES - EXTENT,
    )
}

/// One actor moved to an empty cell, given a class absent from its cell, or
/// switched between stationary and moving.
fn mutate(scene: &Scene, rng: &mut SplitMix64) -> Scene {
    let mut s = scene.clone();
    let i = rng.below(s.actors.len() as u64) as usize;
    let here = cell(&s.actors[i]);
    let alone = s.actors.iter().filter(|a| cell(a) == here).count() == 1;
    match (rng.below(3), alone) {
        (0, _) => loop {
            let (r, c) = (rng.below(GRID as u64) as usize, rng.below(GRID as u64) as usize);
            if s.actors.iter().all(|a| cell(a) != (r, c)) {
                let (x, y) = centre(r, c);
                s.actors[i].x = x;
                s.actors[i].y = y;
                break;
            }
        },
        (1, _) => {
            let taken: Vec<ActorClass> = s.actors.iter().filter(|a| cell(a) == here).map(|a| a.class).collect();
            let free: Vec<ActorClass> = ActorClass::ALL.into_iter().filter(|c| !taken.contains(c)).collect();
            s.actors[i].class = free[rng.below(free.len() as u64) as usize];
        }
        (_, true) => {
            let a = &mut s.actors[i];
            if a.speed() > 0.0 {
                a.vx = 0.0;
                a.vy = 0.0;
                a.status = Status::Stopped;
            } else {
                a.vx = 3.0;
                a.status = Status::Moving;
            }
        }
        (_, false) => return mutate(scene, rng),
    }
    s
}

#[test]
fn rasterization_and_encoding_separate_1000_mutated_pairs() {
    let enc = FrozenEncoderParams::canonical();
    let mut rng = SplitMix64::derive(3, "injectivity");
    for k in 0..1000 {
        let a = random_scene(&mut rng);
        let b = mutate(&a, &mut rng);
        assert_ne!(a, b);
        let (ga, gb) = (rasterize(&a).unwrap(), rasterize(&b).unwrap());
        assert_ne!(ga.tensor.data(), gb.tensor.data(), "pair {k}: {a:?} vs {b:?}");
        assert_ne!(
            encode_scene(&a, &enc).unwrap().data(),
            encode_scene(&b, &enc).unwrap().data(),
            "pair {k}"
        );
    }
}

#[test]
fn encoding_is_deterministic_and_parameters_frozen() {
    let enc = FrozenEncoderParams::canonical();
    let before = enc.checksum();
    let ep = gen_episode(4, episode_seed(7, 4), &SceneConfig::default());
    for s in &ep.scenes {
        assert_eq!(
            encode_scene(s, &enc).unwrap(),
            encode_scene(s, &FrozenEncoderParams::canonical()).unwrap()
        );
    }
    assert_eq!(enc.checksum(), before);
    assert!(enc.to_store().iter().all(|(_, t)| !t.requires_grad()));
}
