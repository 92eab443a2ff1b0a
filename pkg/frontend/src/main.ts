import { Console } from "./controller.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app mount point");
}
const console_ = new Console(root);
void console_.loadQueue(null);
