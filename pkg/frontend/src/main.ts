import { bootFromLocation } from "./app";

const root = document.getElementById("app");
if (root) {
  const controller = bootFromLocation(root, window.location);
  if (controller) void controller.start();
}
