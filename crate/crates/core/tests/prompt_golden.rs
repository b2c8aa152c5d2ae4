//! Rendered prompts pinned byte-for-byte. Set `TARDIS_UPDATE_GOLDEN=1` to
//! rewrite the files after an intentional template change.

mod common;

use common::golden::{anchors, bindings, golden_path, DOMAINS};
use tardis_core::prompt::{builtin_template_set, TemplateId};

#[test]
fn rendered_prompts_match_golden_files() {
    let update = std::env::var_os("TARDIS_UPDATE_GOLDEN").is_some();
    let mut failures = Vec::new();
    for domain in DOMAINS {
        let set = builtin_template_set(domain).unwrap();
        for id in TemplateId::ALL {
            let rendered = set.render(id, &bindings(id)).unwrap();
            for anchor in anchors(domain, id) {
                assert!(rendered.contains(anchor), "{domain}/{}: missing anchor `{anchor}`", id.as_str());
            }
            assert!(!rendered.contains('{'), "{domain}/{}: unfilled placeholder", id.as_str());
            let path = golden_path(domain, id);
            if update {
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                std::fs::write(&path, &rendered).unwrap();
                continue;
            }
            let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if want != rendered {
                failures.push(format!("{domain}/{}", id.as_str()));
            }
        }
    }
    assert!(failures.is_empty(), "golden mismatch: {failures:?}");
}

#[test]
fn domain_wording_is_substituted() {
    let banking = builtin_template_set("banking").unwrap();
    let p = banking
        .render(TemplateId::ClassDescription, &bindings(TemplateId::ClassDescription))
        .unwrap();
    assert!(p.contains("about banking"));
    let daily = builtin_template_set("daily_life").unwrap();
    let p = daily
        .render(TemplateId::SegGenerate, &bindings(TemplateId::SegGenerate))
        .unwrap();
    assert!(p.contains("daily life"));
}
