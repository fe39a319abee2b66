from evkd.events import read_event_file, stack_to_frames, render_event_image
from skimage.io import imsave
import os

filename = "data/events/recording.bin"
out = "data/frames"
os.makedirs(out, exist_ok=True)
stream = read_event_file(filename)
frames = stack_to_frames(stream, 499)  # generator, one frame in memory at a time
for i, frame in enumerate(frames):
    imsave(f"{out}/frame_{i:04d}.png", render_event_image(frame), check_contrast=False)
