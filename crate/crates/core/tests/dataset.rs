mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::sync::Arc;

use dsr_core::acl::Role;
use dsr_core::dataset::diff_manifests;
use dsr_core::{CheckinRequest, Commit, Error, ManualClock, QueryExpr, Repo, Selector};
use proptest::prelude::*;
use support::{new_repo, p, read_tree, root, seeded, tree};

fn checkin(repo: &Repo, ds: &str, dir: &std::path::Path, msg: &str) -> Commit {
    repo.checkin(&root(), CheckinRequest::new(ds, dir).message(msg))
        .unwrap()
        .commit
}

fn clocked(repo: Repo, at: i64) -> (Repo, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::at_secs(at));
    (repo.with_clock(clock.clone()), clock)
}

#[test]
fn genesis_then_identical_tree_is_empty_commit() {
    let (d, repo) = new_repo();
    let w = tree(d.path(), "w", &[("a.txt", b"a"), ("b.bin", &[0, 1, 2])]);
    let c = checkin(&repo, "cats", &w, "v1");
    assert!(c.parents.is_empty());
    assert_eq!(repo.head("cats").unwrap(), Some(c.commit_id));
    let err = repo
        .checkin(&root(), CheckinRequest::new("cats", &w))
        .unwrap_err();
    assert!(matches!(err, Error::EmptyCommit(id) if id == c.commit_id));
    assert_eq!(err.code(), "EMPTY_COMMIT");
    let again = repo
        .checkin(&root(), CheckinRequest::new("cats", &w).allow_empty(true))
        .unwrap()
        .commit;
    assert_eq!(again.parents, vec![c.commit_id]);
    assert_eq!(again.manifest_id, c.manifest_id);
}

#[test]
fn reader_cannot_check_in() {
    let (d, repo) = new_repo();
    repo.grant(&root(), &p("rita"), "cats", Role::Reader).unwrap();
    let w = tree(d.path(), "w", &[("a.txt", b"a")]);
    let err = repo
        .checkin(&p("rita"), CheckinRequest::new("cats", &w))
        .unwrap_err();
    assert_eq!(err.code(), "PERMISSION_DENIED");
    assert_eq!(repo.head("cats").unwrap(), None);
}

#[test]
fn checkout_head_tag_query_and_revoked() {
    let (d, repo) = new_repo();
    let big = seeded(1, 100_000);
    let files: &[(&str, &[u8])] = &[("a.txt", b"hello"), ("b.bin", &big), ("sub/c", b"")];
    let w = tree(d.path(), "w", files);
    let v1 = repo
        .checkin(&root(), CheckinRequest::new("cats", &w).tag("golden"))
        .unwrap()
        .commit;

    let out = d.path().join("out");
    repo.checkout(&root(), &Selector::Head("cats".into()), &out, false)
        .unwrap();
    assert_eq!(read_tree(&out), read_tree(&w));

    let out = d.path().join("by-tag");
    let got = repo
        .checkout(&root(), &Selector::Query(QueryExpr::tag("golden")), &out, false)
        .unwrap();
    assert_eq!(got[0].commit.commit_id, v1.commit_id);
    assert_eq!(read_tree(&out), read_tree(&w));

    let short = &v1.commit_id.to_hex()[..12];
    let out = d.path().join("by-id");
    repo.checkout(&root(), &Selector::Commit(short.into()), &out, false)
        .unwrap();
    assert_eq!(read_tree(&out), read_tree(&w));

    repo.revoke(&root(), &v1.commit_id, "leak", true).unwrap();
    let err = repo
        .checkout(&root(), &Selector::Head("cats".into()), &d.path().join("r"), false)
        .unwrap_err();
    assert!(matches!(err, Error::RevokedData(id) if id == v1.commit_id));
    // Revoked commits vanish from queries unless asked for.
    let err = repo
        .checkout(&root(), &Selector::Query(QueryExpr::tag("golden")), &d.path().join("q"), false)
        .unwrap_err();
    assert_eq!(err.code(), "NO_MATCH");
    let q = QueryExpr {
        include_revoked: true,
        ..QueryExpr::tag("golden")
    };
    assert_eq!(repo.query(&root(), &q).unwrap().len(), 1);
}

#[test]
fn ambiguous_query_and_multi_checkout() {
    let (d, repo) = new_repo();
    let a = checkin(&repo, "img-a", &tree(d.path(), "a", &[("x", b"1")]), "a");
    let b = checkin(&repo, "img-b", &tree(d.path(), "b", &[("x", b"2")]), "b");
    let sel = Selector::Query(QueryExpr::dataset("img-*"));
    let err = repo
        .checkout(&root(), &sel, &d.path().join("o1"), false)
        .unwrap_err();
    assert!(matches!(err, Error::AmbiguousQuery(2)));
    let dest = d.path().join("o2");
    repo.checkout(&root(), &sel, &dest, true).unwrap();
    for c in [a, b] {
        let sub = dest.join(format!("{}@{}", c.dataset, c.commit_id.short()));
        assert_eq!(read_tree(&sub).len(), 1, "{}", sub.display());
    }
    let err = repo
        .checkout(&root(), &Selector::Query(QueryExpr::dataset("none")), &dest, false)
        .unwrap_err();
    assert!(matches!(err, Error::NoMatch));
}

#[test]
fn checkout_reports_missing_chunk() {
    let (d, repo) = new_repo();
    let c = checkin(&repo, "cats", &tree(d.path(), "w", &[("a", &seeded(3, 50_000))]), "v1");
    let m = repo.store().load_manifest(&c.manifest_id).unwrap();
    let victim = m.entries()[0].chunks[0].id;
    fs::remove_file(repo.store().object_path(&victim)).unwrap();
    let err = repo
        .checkout(&root(), &Selector::Head("cats".into()), &d.path().join("o"), false)
        .unwrap_err();
    assert_eq!(err.code(), "CORRUPTION");
    assert!(err.to_string().contains(&victim.to_hex()));
}

#[test]
fn diff_examples() {
    let (d, repo) = new_repo();
    let v1 = checkin(&repo, "cats", &tree(d.path(), "1", &[("a.txt", b"a"), ("b.bin", b"b")]), "v1");
    let v2 = checkin(
        &repo,
        "cats",
        &tree(d.path(), "2", &[("a.txt", b"a"), ("b.bin", b"b"), ("c.txt", b"c")]),
        "v2",
    );
    let v3 = checkin(
        &repo,
        "cats",
        &tree(d.path(), "3", &[("a.txt", b"a"), ("b.bin", b"B"), ("c.txt", b"c")]),
        "v3",
    );
    let same = repo.diff(&root(), &v1.commit_id, &v1.commit_id).unwrap();
    assert!(same.is_empty());
    assert_eq!(same.unchanged_count, 2);
    let fwd = repo.diff(&root(), &v1.commit_id, &v2.commit_id).unwrap();
    assert_eq!(fwd.added, vec!["c.txt"]);
    let back = repo.diff(&root(), &v2.commit_id, &v1.commit_id).unwrap();
    assert_eq!(back.deleted, vec!["c.txt"]);
    let m = repo.diff(&root(), &v2.commit_id, &v3.commit_id).unwrap();
    assert_eq!(m.modified, vec!["b.bin"]);
    assert!(m.added.is_empty() && m.deleted.is_empty());
    let unknown = "0".repeat(64).parse().unwrap();
    assert_eq!(repo.diff(&root(), &v1.commit_id, &unknown).unwrap_err().code(), "NOT_FOUND");
}

#[test]
fn query_examples() {
    let (d, repo) = new_repo();
    let (repo, clock) = clocked(repo, 1_000);
    let a = repo
        .checkin(&root(), CheckinRequest::new("img-train", tree(d.path(), "a", &[("x", b"1")])))
        .unwrap()
        .commit;
    clock.advance_secs(10);
    let b = repo
        .checkin(
            &root(),
            CheckinRequest::new("img-eval", tree(d.path(), "b", &[("x", b"2")])).tag("labeled"),
        )
        .unwrap()
        .commit;
    clock.advance_secs(10);
    let c = repo
        .checkin(
            &root(),
            CheckinRequest::new("text-corpus", tree(d.path(), "c", &[("x", b"3")])).attr("lang", "en"),
        )
        .unwrap()
        .commit;
    let ids = |q: QueryExpr| -> Vec<_> {
        repo.query(&root(), &q)
            .unwrap()
            .into_iter()
            .map(|c| c.commit_id)
            .collect()
    };
    assert_eq!(ids(QueryExpr::default()), vec![c.commit_id, b.commit_id, a.commit_id]);
    assert_eq!(ids(QueryExpr::tag("labeled")), vec![b.commit_id]);
    assert_eq!(ids(QueryExpr::dataset("img-*")), vec![b.commit_id, a.commit_id]);
    assert_eq!(ids(QueryExpr::parse("attr.lang=en").unwrap()), vec![c.commit_id]);
    assert_eq!(ids(QueryExpr::parse("after=1000 before=1020").unwrap()), vec![b.commit_id]);
    assert!(matches!(
        repo.query(&root(), &QueryExpr::dataset("[x")),
        Err(Error::Validation(_))
    ));

    // Unreadable datasets are filtered, not reported.
    repo.grant(&root(), &p("vic"), "img-eval", Role::Reader).unwrap();
    assert_eq!(
        repo.query(&p("vic"), &QueryExpr::default())
            .unwrap()
            .iter()
            .map(|c| c.commit_id)
            .collect::<Vec<_>>(),
        vec![b.commit_id]
    );
    assert!(repo.query(&p("nobody"), &QueryExpr::default()).unwrap().is_empty());
}

#[test]
fn equal_timestamps_order_by_id() {
    let (d, repo) = new_repo();
    let (repo, _clock) = clocked(repo, 50);
    let mut ids: Vec<_> = (0..5)
        .map(|i| {
            checkin(&repo, &format!("d{i}"), &tree(d.path(), &i.to_string(), &[("f", &[i as u8])]), "")
                .commit_id
        })
        .collect();
    ids.sort();
    let got: Vec<_> = repo
        .query(&root(), &QueryExpr::default())
        .unwrap()
        .into_iter()
        .map(|c| c.commit_id)
        .collect();
    assert_eq!(got, ids);
}

#[test]
fn log_tag_and_versions() {
    let (d, repo) = new_repo();
    let v: Vec<Commit> = (1..=3)
        .map(|i| {
            checkin(&repo, "cats", &tree(d.path(), &format!("v{i}"), &[("f", &[i as u8])]), "")
        })
        .collect();
    let log: Vec<_> = repo.log(&root(), "cats").unwrap();
    assert_eq!(log, vec![v[2].clone(), v[1].clone(), v[0].clone()]);
    assert_eq!(repo.version_of(&v[2]).unwrap(), 3);

    repo.grant(&root(), &p("rita"), "cats", Role::Reader).unwrap();
    let err = repo.tag(&p("rita"), "best", &v[0].commit_id).unwrap_err();
    assert_eq!(err.code(), "PERMISSION_DENIED");
    repo.tag(&root(), "best", &v[0].commit_id).unwrap();
    repo.tag(&root(), "also", &v[0].commit_id).unwrap();
    // Retagging the same commit is a no-op; pointing elsewhere is refused.
    repo.tag(&root(), "best", &v[0].commit_id).unwrap();
    assert_eq!(repo.tag(&root(), "best", &v[1].commit_id).unwrap_err().code(), "VALIDATION");
    let view = repo.view(v[0].clone()).unwrap();
    assert_eq!(view.tags, vec!["also", "best"]);
    assert_eq!(view.version, 1);
}

#[test]
fn delete_then_gc_reclaims_unique_chunks() {
    let (d, repo) = new_repo();
    let shared = seeded(10, 80_000);
    let only_dogs = seeded(11, 80_000);
    let cats = checkin(&repo, "cats", &tree(d.path(), "c", &[("s", &shared)]), "");
    let dogs = checkin(
        &repo,
        "dogs",
        &tree(d.path(), "d", &[("s", &shared), ("u", &only_dogs)]),
        "",
    );
    repo.tag(&root(), "good-dog", &dogs.commit_id).unwrap();

    let chunks_of = |c: &Commit| -> BTreeSet<_> {
        repo.store()
            .load_manifest(&c.manifest_id)
            .unwrap()
            .entries()
            .iter()
            .flat_map(|e| e.chunks.iter().map(|r| r.id))
            .collect()
    };
    let keep = chunks_of(&cats);
    let expected: BTreeSet<_> = chunks_of(&dogs).difference(&keep).copied().collect();
    assert!(!expected.is_empty());

    repo.grant(&root(), &p("wes"), "dogs", Role::Writer).unwrap();
    assert_eq!(repo.delete_dataset(&p("wes"), "dogs").unwrap_err().code(), "PERMISSION_DENIED");
    let t = repo.delete_dataset(&root(), "dogs").unwrap();
    assert_eq!(t.head, Some(dogs.commit_id));
    assert_eq!(repo.head("dogs").unwrap(), None);
    assert!(repo.tags().unwrap().is_empty());
    // Objects stay until gc.
    assert!(repo.commit_exists(&dogs.commit_id));
    assert_eq!(repo.tombstones().unwrap(), vec![t]);

    let before = repo.store().list_chunks().unwrap();
    let summary = repo.gc(&root()).unwrap();
    let after = repo.store().list_chunks().unwrap();
    let removed: BTreeSet<_> = before.difference(&after).copied().collect();
    assert_eq!(removed, expected);
    assert_eq!(summary.report.deleted, expected.len());
    assert_eq!(after, keep);
    let out = d.path().join("o");
    repo.checkout(&root(), &Selector::Head("cats".into()), &out, false)
        .unwrap();
    assert_eq!(read_tree(&out)["s"], shared);
}

#[test]
fn symlink_escape_is_rejected() {
    let (d, repo) = new_repo();
    let outside = d.path().join("secret");
    fs::write(&outside, b"s").unwrap();
    let w = tree(d.path(), "w", &[("a", b"a")]);
    std::os::unix::fs::symlink(&outside, w.join("link")).unwrap();
    let err = repo
        .checkin(&root(), CheckinRequest::new("cats", &w))
        .unwrap_err();
    assert_eq!(err.code(), "VALIDATION");
    assert!(err.to_string().contains("escapes"));

    // A link that stays inside the tree is stored as the file it points at.
    let w2 = tree(d.path(), "w2", &[("a", b"a")]);
    std::os::unix::fs::symlink(w2.join("a"), w2.join("b")).unwrap();
    let c = checkin(&repo, "cats", &w2, "");
    let m = repo.store().load_manifest(&c.manifest_id).unwrap();
    assert_eq!(m.get("b").unwrap().file_hash, m.get("a").unwrap().file_hash);
}

#[test]
fn concurrent_checkins_linearise_the_head() {
    let (d, repo) = new_repo();
    let threads = 8;
    let per = 6;
    let won: Vec<Commit> = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                let repo = repo.clone();
                let base = d.path().to_owned();
                sc.spawn(move || {
                    let mut won = Vec::new();
                    for i in 0..per {
                        let w = tree(&base, &format!("t{t}-{i}"), &[("f", format!("{t}/{i}").as_bytes())]);
                        match repo.checkin(&root(), CheckinRequest::new("cats", &w)) {
                            Ok(o) => won.push(o.commit),
                            Err(e) => assert!(e.is_retryable(), "{e}"),
                        }
                    }
                    won
                })
            })
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    assert!(!won.is_empty());
    let log = repo.log(&root(), "cats").unwrap();
    // Every successful check-in is on the head's first-parent chain.
    let chain: BTreeSet<_> = log.iter().map(|c| c.commit_id).collect();
    let winners: BTreeSet<_> = won.iter().map(|c| c.commit_id).collect();
    assert_eq!(chain, winners);
    assert_eq!(log.len(), won.len());
    assert_eq!(repo.events().unwrap().len(), won.len());
}

#[test]
fn parent_override_and_bad_names() {
    let (d, repo) = new_repo();
    let v1 = checkin(&repo, "cats", &tree(d.path(), "1", &[("f", b"1")]), "");
    let _v2 = checkin(&repo, "cats", &tree(d.path(), "2", &[("f", b"2")]), "");
    let v3 = repo
        .checkin(
            &root(),
            CheckinRequest::new("cats", tree(d.path(), "3", &[("f", b"3")])).parents(vec![v1.commit_id]),
        )
        .unwrap()
        .commit;
    assert_eq!(v3.parents, vec![v1.commit_id]);
    for bad in ["", "a/b", "..", "sp ace"] {
        let err = repo
            .checkin(&root(), CheckinRequest::new(bad, d.path().join("1")))
            .unwrap_err();
        assert_eq!(err.code(), "VALIDATION", "{bad:?}");
    }
}

// ---- properties ----

fn path_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-c]{1,2}", 1..3).prop_map(|v| v.join("/"))
}

/// A file tree with no path that is also a directory prefix of another.
fn tree_strategy(max_files: usize, max_len: usize) -> impl Strategy<Value = BTreeMap<String, Vec<u8>>> {
    prop::collection::btree_map(path_strategy(), prop::collection::vec(any::<u8>(), 0..max_len), 0..max_files)
        .prop_map(|m| {
            let keys: Vec<String> = m.keys().cloned().collect();
            m.into_iter()
                .filter(|(k, _)| !keys.iter().any(|o| o.starts_with(&format!("{k}/"))))
                .collect()
        })
}

fn materialise(dir: &std::path::Path, t: &BTreeMap<String, Vec<u8>>) {
    fs::create_dir_all(dir).unwrap();
    for (k, v) in t {
        let p = dir.join(k);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, v).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkout_inverts_checkin(t in tree_strategy(40, 20_000)) {
        let (d, repo) = new_repo();
        let w = d.path().join("w");
        materialise(&w, &t);
        let c = repo
            .checkin(&root(), CheckinRequest::new("ds", &w).allow_empty(true))
            .unwrap()
            .commit;
        let out = d.path().join("o");
        repo.checkout(&root(), &Selector::Commit(c.commit_id.to_hex()), &out, false).unwrap();
        prop_assert_eq!(read_tree(&out), t);
    }

    #[test]
    fn diff_matches_path_set_oracle(a in tree_strategy(12, 4), b in tree_strategy(12, 4)) {
        let (d, repo) = new_repo();
        let (wa, wb) = (d.path().join("a"), d.path().join("b"));
        materialise(&wa, &a);
        materialise(&wb, &b);
        let ca = repo.checkin(&root(), CheckinRequest::new("x", &wa)).unwrap().commit;
        let cb = repo.checkin(&root(), CheckinRequest::new("y", &wb)).unwrap().commit;
        let r = repo.diff(&root(), &ca.commit_id, &cb.commit_id).unwrap();

        let ka: BTreeSet<&String> = a.keys().collect();
        let kb: BTreeSet<&String> = b.keys().collect();
        let added: Vec<String> = kb.difference(&ka).map(|s| s.to_string()).collect();
        let deleted: Vec<String> = ka.difference(&kb).map(|s| s.to_string()).collect();
        let modified: Vec<String> = ka.intersection(&kb).filter(|k| a[**k] != b[**k]).map(|s| s.to_string()).collect();
        let unchanged = ka.intersection(&kb).filter(|k| a[**k] == b[**k]).count();
        prop_assert_eq!(&r.added, &added);
        prop_assert_eq!(&r.deleted, &deleted);
        prop_assert_eq!(&r.modified, &modified);
        prop_assert_eq!(r.unchanged_count, unchanged);
        prop_assert_eq!(r.added.len() + r.deleted.len() + r.modified.len() + r.unchanged_count,
                        ka.union(&kb).count());

        let ma = repo.store().load_manifest(&ca.manifest_id).unwrap();
        let mb = repo.store().load_manifest(&cb.manifest_id).unwrap();
        let back = diff_manifests(&mb, &ma);
        prop_assert_eq!(back.added, r.deleted);
        prop_assert_eq!(back.deleted, r.added);
        prop_assert_eq!(back.modified, r.modified);
    }

    #[test]
    fn query_matches_brute_force_filter(
        commits in prop::collection::vec((0..4usize, 0..3usize, 0..3usize, 0..4i64), 1..10),
        q_ds in prop::option::of(0..5usize),
        q_tag in prop::option::of(0..3usize),
        q_attr in prop::option::of(0..3usize),
        q_after in prop::option::of(0..5i64),
        head_only in any::<bool>(),
    ) {
        let datasets = ["img-a", "img-b", "txt", "raw"];
        let globs = ["img-a", "img-b", "txt", "raw", "img-*"];
        let (d, repo) = new_repo();
        let (repo, clock) = clocked(repo, 0);
        let mut made: Vec<(Commit, Option<String>)> = Vec::new();
        for (i, (ds, tag, attr, t)) in commits.iter().enumerate() {
            clock.set_secs(*t);
            let w = tree(d.path(), &format!("w{i}"), &[("f", format!("{i}").as_bytes())]);
            let mut req = CheckinRequest::new(datasets[*ds], &w).attr("k", attr.to_string());
            let tag_name = (*tag > 0).then(|| format!("t{i}-{tag}"));
            if let Some(t) = &tag_name {
                req = req.tag(t.clone());
            }
            made.push((repo.checkin(&root(), req).unwrap().commit, tag_name));
        }
        let q = QueryExpr {
            dataset: q_ds.map(|i| globs[i].to_string()),
            tag: q_tag.and_then(|t| made.get(t).and_then(|(_, n)| n.clone())),
            attrs: q_attr.map(|a| BTreeMap::from([("k".to_string(), a.to_string())])).unwrap_or_default(),
            after: q_after,
            head_only,
            ..Default::default()
        };
        let heads: BTreeSet<_> = repo.dataset_heads().unwrap().into_values().collect();
        let mut expected: Vec<&Commit> = made
            .iter()
            .filter(|(c, tag)| {
                q.dataset.as_ref().is_none_or(|g| {
                    if let Some(prefix) = g.strip_suffix('*') { c.dataset.starts_with(prefix) } else { &c.dataset == g }
                }) && q.tag.as_ref().is_none_or(|t| tag.as_ref() == Some(t))
                    && q.attrs.iter().all(|(k, v)| c.attributes.get(k) == Some(v))
                    && q.after.is_none_or(|a| c.timestamp > a)
                    && (!head_only || heads.contains(&c.commit_id))
            })
            .map(|(c, _)| c)
            .collect();
        expected.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(a.commit_id.cmp(&b.commit_id)));
        let got = repo.query(&root(), &q).unwrap();
        prop_assert_eq!(got.iter().collect::<Vec<_>>(), expected);
    }
}
