"""Regenerate the builtin network descriptors under src/hbmflow/zoo/.

Layers are listed in pipeline order. Residual adds are not layers: the first
layer of each block reads the previous block's last conv and takes a skip
edge from the block's shortcut operand. FC layers are 1x1 convs on a 1x1
spatial extent.
"""
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "hbmflow" / "zoo"


class Builder:
    def __init__(self, name):
        self.lines = [f"network {name}"]
        self.n = 0

    def conv(self, kind, k, ci, co, stride, in_hw, src=None):
        out_hw = -(-in_hw // stride)
        line = (f"layer {self.n} kind={kind} kh={k} kw={k} ci={ci} co={co} stride={stride} "
                f"in={in_hw}x{in_hw} out={out_hw}x{out_hw} pi=1 po=1")
        if src is not None and src != self.n - 1:
            line += f" src={src}"
        self.lines.append(line)
        self.n += 1
        return self.n - 1, out_hw

    def edge(self, a, b):
        self.lines.append(f"edge {a} {b}")

    def text(self):
        return "\n".join(self.lines) + "\n"


def resnet(name, blocks, bottleneck):
    b = Builder(name)
    stem, hw = b.conv("standard-conv", 7, 3, 64, 2, 224)
    hw //= 2  # 3x3/2 max pool
    main, shortcut = stem, None  # block input = main (+ shortcut)
    ci = 64
    widths = (64, 128, 256, 512)
    for stage, (nblk, mid) in enumerate(zip(blocks, widths)):
        co = mid * 4 if bottleneck else mid
        for j in range(nblk):
            stride = 2 if (stage > 0 and j == 0) else 1
            pending_skip = []
            if bottleneck:
                a, _ = b.conv("pointwise-conv", 1, ci, mid, 1, hw, src=main)
                bb, out_hw = b.conv("standard-conv", 3, mid, mid, stride, hw)
                c, _ = b.conv("pointwise-conv", 1, mid, co, 1, out_hw)
            else:
                a, out_hw = b.conv("standard-conv", 3, ci, mid, stride, hw, src=main)
                c, _ = b.conv("standard-conv", 3, mid, co, 1, out_hw)
            if shortcut is not None:
                b.edge(shortcut, a)
            if j == 0 and (stride != 1 or ci != co):
                proj, _ = b.conv("pointwise-conv", 1, ci, co, stride, hw, src=main)
                nxt_short = proj
            else:
                nxt_short = main
            main, shortcut, ci, hw = c, nxt_short, co, out_hw
    fc, _ = b.conv("fc-as-1x1", 1, ci, 1000, 1, 1, src=main)
    b.edge(shortcut, fc)
    return b.text()


def vgg16():
    b = Builder("vgg16")
    hw, ci = 224, 3
    for co, reps in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for _ in range(reps):
            b.conv("standard-conv", 3, ci, co, 1, hw)
            ci = co
        hw //= 2
    # flatten 7x7x512 into the channel dimension of fc6
    b.conv("fc-as-1x1", 1, 7 * 7 * 512, 4096, 1, 1)
    b.conv("fc-as-1x1", 1, 4096, 4096, 1, 1)
    b.conv("fc-as-1x1", 1, 4096, 1000, 1, 1)
    return b.text()


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    nets = {
        "resnet18": resnet("resnet18", (2, 2, 2, 2), bottleneck=False),
        "resnet50": resnet("resnet50", (3, 4, 6, 3), bottleneck=True),
        "vgg16": vgg16(),
    }
    for name, text in nets.items():
        (OUT / f"{name}.net").write_text(text)
        print(f"wrote {name}: {text.count(chr(10) + 'layer')} layers")


if __name__ == "__main__":
    main()
