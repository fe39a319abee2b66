from evkd.toy import make_toy_video
from evkd.inference import ttt_schedule, track_video
from evkd.plotting import plot_ttt_log, save_figure
import numpy as np


if __name__ == "__main__":
    video = make_toy_video(n_frames=40, seed=3)
    result = ttt_schedule(video, {"epochs": 10})
    print(result.log)
    base, _ = track_video(video.base, None, video)
    tuned, _ = track_video(video.base, result.adapter, video)
    print("frames changed by tuning:", int(np.any(base != tuned, axis=1).sum()))
    fig, ax = plot_ttt_log(result.log)
    save_figure(fig, "data/ttt_log.svg")
