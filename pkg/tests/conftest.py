import os

import pytest

GT_BOXES = {
    "vid_a": ["10,10,40,30,0", "12,11,40,30,0", "14,12,40,30,0", "16,13,40,30,0"],
    "vid_b": ["100,200,50,50,0", "102,201,50,50,0", "104,202,50,50,0", "106,203,50,50,0"],
    "vid_c": ["300,300,20,40,0", "0,0,0,0,1", "304,302,20,40,0", "306,303,20,40,0"],
}


def write_dataset(root, boxes=GT_BOXES):
    """Two test videos and one train video in the canonical on-disk layout."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "train.txt"), "w") as f:
        f.write("vid_a\n")
    open(os.path.join(root, "val.txt"), "w").close()
    with open(os.path.join(root, "test.txt"), "w") as f:
        f.write("vid_b\nvid_c\n")
    with open(os.path.join(root, "attributes.csv"), "w") as f:
        f.write("video_id,attributes\nvid_b,CM,FM\nvid_c,FM\n")
    with open(os.path.join(root, "classes.csv"), "w") as f:
        f.write("vid_a,car\nvid_b,car\nvid_c,drone\n")
    for video_id, lines in boxes.items():
        os.makedirs(os.path.join(root, video_id), exist_ok=True)
        with open(os.path.join(root, video_id, "groundtruth.txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
    return root


def write_perfect_results(results_dir, boxes=GT_BOXES):
    os.makedirs(results_dir, exist_ok=True)
    for video_id, lines in boxes.items():
        with open(os.path.join(results_dir, f"{video_id}.txt"), "w") as f:
            for line in lines:
                f.write(",".join(line.split(",")[:4]) + "\n")
    return results_dir


@pytest.fixture
def dataset_root(tmp_path):
    return write_dataset(str(tmp_path / "dataset"))


@pytest.fixture
def perfect_results(tmp_path):
    return write_perfect_results(str(tmp_path / "results"))
