#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub const DAY: i64 = 86_400;
/// 2024-01-01T00:00:00Z
pub const T0: i64 = 1_704_067_200;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_chronoplay"))
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn chronoplay")
}

pub fn ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "chronoplay {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_lines(path: &Path, items: &[Value]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let text: String = items.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(path, text).unwrap();
}

const ITEMS: [(&str, &str, &str); 12] = [
    ("Crossbow", "ranged weapon", "Old Villedor"),
    ("Paraglider", "traversal tool", "Central Loop"),
    ("Grappling Hook", "traversal tool", "Garrison"),
    ("Night Runner", "player rank", "Bazaar"),
    ("Med Kit", "healing item", "Fish Eye"),
    (
        "Energy Drink",
        "stamina consumable",
        "Saint Joseph Hospital",
    ),
    ("Ghillie Suit", "stealth outfit", "Muddy Grounds"),
    ("Silencer", "weapon mod", "Trinity"),
    ("Solar Array", "settlement facility", "Houndfield"),
    ("Water Cache", "settlement facility", "Horseshoe"),
    ("Kar98k", "rifle", "Newfound Lake"),
    ("Ornithopter", "vehicle", "Downtown"),
];

pub fn documents() -> Vec<Value> {
    let mut out = Vec::new();
    for (i, (name, kind, place)) in ITEMS.iter().enumerate() {
        let body = format!(
            "{name} is a {kind} that players usually obtain around {place}. \
             Its upgrade path needs {} salvage and {} rare parts. \
             Veteran players pair {name} with night routes because infected move slower after dusk.",
            40 + 5 * i,
            2 + i % 4
        );
        out.push(json!({
            "doc_id": format!("wiki-{i:02}"),
            "title": name,
            "body": body,
            "published_at": T0 - (60 - i as i64) * DAY,
            "source_kind": "wiki",
            "game_id": "villedor",
        }));
    }
    out.push(json!({
        "doc_id": "update-01",
        "title": "Patch 1.2 notes",
        "body": "Patch 1.2 released on 2023-12-12 lowers the stamina drain while climbing in Old Villedor. Performance on older hardware improves by about ten percent.",
        "source_kind": "official_update",
        "game_id": "villedor",
    }));
    out
}

const MECHANICS: [&str; 8] = [
    "How does the grappling mechanic interact with the Paraglider near Central Loop",
    "Why does stamina drain so fast when climbing around Garrison",
    "How does combat damage scale on the Crossbow against volatiles",
    "What controls the parkour momentum when jumping from the Bazaar rooftops",
    "How does crafting the Silencer change stealth detection range",
    "Explain the mechanics behind the Night Runner rank bonuses",
    "Which crafting mechanics apply to the Kar98k upgrade tree",
    "How does the Ornithopter handle strong wind near Downtown",
];

const GUIDE: [&str; 6] = [
    "Where do i find the Ghillie Suit blueprint in Muddy Grounds",
    "Any guide for farming rare parts near Trinity quickly",
    "Tips to unlock the Solar Array in Houndfield early",
    "Guide for reaching the Water Cache at Horseshoe without dying",
    "Where do i find enough salvage for the Med Kit recipe at Fish Eye",
    "Best route to unlock Energy Drink crafting at Saint Joseph Hospital",
];

const PERFORMANCE: [&str; 6] = [
    "My fps drops hard whenever I glide over Central Loop at night",
    "Why does the framerate stutter inside the Bazaar market",
    "Severe lag spikes when my squad fights near Garrison",
    "Stuttering after the latest driver around Old Villedor, what helps",
    "Performance tanks for me once rain starts over Newfound Lake",
    "My fps halves while the Ornithopter crosses Downtown",
];

const CRASH: [&str; 6] = [
    "Game keeps crashing when I open the map at Trinity",
    "Black screen after loading my save near Fish Eye",
    "The client freezes whenever I craft a Med Kit",
    "Crash to desktop during the Houndfield cutscene, any fix",
    "Error code 0x8 shows up after the Horseshoe quest",
    "My game freezes when the Kar98k reload animation plays",
];

fn post(id: String, text: &str, at: i64) -> Value {
    json!({"post_id": id, "text": text, "created_at": at, "game_id": "villedor"})
}

/// Mined history: days 0-10, mostly mechanics and guides.
pub fn history() -> Vec<Value> {
    let mut texts: Vec<&str> = Vec::new();
    texts.extend(MECHANICS);
    texts.extend(GUIDE);
    texts.extend(&PERFORMANCE[..3]);
    texts.extend(&CRASH[..3]);
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| post(format!("h{i:02}"), t, T0 + i as i64 * DAY / 2))
        .collect()
}

fn stream(prefix: &str, texts: &[&str], from_day: i64, count: usize, span_days: i64) -> Vec<Value> {
    (0..count)
        .map(|i| {
            let at = T0 + from_day * DAY + (i as i64 * span_days * DAY) / count as i64;
            post(format!("{prefix}{i:02}"), texts[i % texts.len()], at)
        })
        .collect()
}

fn announcement(id: &str, text: &str, day: i64) -> Value {
    json!({"kind": "announcement", "id": id, "text": text, "timestamp": T0 + day * DAY})
}

fn as_events(posts: Vec<Value>) -> Vec<Value> {
    posts
        .into_iter()
        .map(|mut p| {
            p["kind"] = json!("post");
            p
        })
        .collect()
}

/// Step 1 (day 20): one announcement, a trickle of posts.
/// Step 2 (day 35): an announcement and a burst of technical posts that flips
/// the topic mix. Step 3 (day 50): another announcement, few posts.
fn events() -> [Vec<Value>; 3] {
    let mut s1 = vec![announcement(
        "a1",
        "Patch 1.5 rebalances the Crossbow: base damage rises to 150 and reload time drops.",
        19,
    )];
    s1.extend(as_events(stream("s1-", &MECHANICS, 16, 5, 3)));

    let mut tech: Vec<&str> = Vec::new();
    tech.extend(PERFORMANCE);
    tech.extend(CRASH);
    let mut s2 = vec![announcement(
        "a2",
        "Hotfix 7 changes the Crossbow and Old Villedor: updraft lift is reduced near rooftops.",
        33,
    )];
    s2.extend(as_events(stream("s2-", &tech, 30, 30, 5)));

    let mut s3 = vec![announcement(
        "a3",
        "Update 3.2 moves the Ghillie Suit blueprint to a new vendor.",
        45,
    )];
    s3.extend(as_events(stream("s3-", &GUIDE, 46, 4, 3)));
    [s1, s2, s3]
}

pub const CONFIG: &str = r#"game_id = "villedor"
seed = 7
deterministic = true

[synthesis]
game_name = "Dying Light 2"

[paths]
store = "store"
assets = "assets"
"#;

/// Lay the scenario out under `dir`.
pub fn write_scenario(dir: &Path) {
    write_lines(&dir.join("docs/wiki.jsonl"), &documents());
    write_lines(&dir.join("posts.jsonl"), &history());
    for (i, ev) in events().iter().enumerate() {
        write_lines(&dir.join(format!("events/step{}.jsonl", i + 1)), ev);
    }
    std::fs::write(dir.join("chronoplay.toml"), CONFIG).unwrap();
}

pub fn day(d: i64) -> String {
    (T0 + d * DAY).to_string()
}

/// ingest, mine, synth `n`, then the three steps in `mode`.
pub fn build_store(dir: &Path, mode: &str, n: usize) {
    write_scenario(dir);
    let c = ["--config", "chronoplay.toml"];
    let with =
        |args: &[&str]| -> Vec<String> { c.iter().chain(args).map(|s| s.to_string()).collect() };
    let call = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(dir, &refs);
    };
    call(with(&["ingest", "--in", "docs", "--out", "snippets.jsonl"]));
    call(with(&["mine", "--posts", "posts.jsonl"]));
    call(with(&[
        "synth",
        "--snippets",
        "snippets.jsonl",
        "--n",
        &n.to_string(),
    ]));
    for (i, d) in [(1, 20), (2, 35), (3, 50)] {
        let events = format!("events/step{i}.jsonl");
        call(with(&[
            "update",
            "--mode",
            mode,
            "--events",
            &events,
            "--now",
            &day(d),
        ]));
    }
}

/// Every file under `root`, relative path to bytes.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p
                    .strip_prefix(base)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
