import os

OUT = os.environ.get("DEMO_OUT", os.path.join(os.path.dirname(os.path.abspath(__file__)), "out"))
os.makedirs(OUT, exist_ok=True)


def out(name):
    return os.path.join(OUT, name)
