from src.project_meta import get_app_meta


def test_project_meta_matches_current_version():
    meta = get_app_meta()

    assert meta.project_name == "tiered-kv-serving"
    assert meta.version == "0.3.0"
    assert meta.changelog_path.name == "CHANGELOG.md"
    assert meta.tool_label == "tiered-kv-serving 0.3.0"
